from .bounds import (IntervalBox, LinearBounds, crown_dense_bounds, interval_chain,
                     interval_forward, qp_interval_bounds)

__all__ = ["IntervalBox", "LinearBounds", "crown_dense_bounds", "interval_chain",
           "interval_forward", "qp_interval_bounds"]
