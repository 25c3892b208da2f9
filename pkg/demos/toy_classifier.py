"""Train a dynamics classifier on three Gaussian blobs, certify held-out points, and attack them.

Run ``python demos/toy_classifier.py --iterations 300`` for a quick pass; the
defaults match the command-line tool.
"""
import argparse
import time

import numpy as np

from fiode.models import ClassifierModel
from fiode.ode import predict
from fiode.train import SamplingScheduler, TrainConfig, toy_dataset, train_classifier
from fiode.verify.certify import certify_classifier


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--eps", type=float, default=0.05)
    ap.add_argument("--points", type=int, default=30)
    args = ap.parse_args()

    X, y = toy_dataset(seed=0)
    Xt, yt = toy_dataset(seed=1, count=150)
    model = ClassifierModel.init(np.random.default_rng(0), 3, 2, hidden=64, orthogonal=True)
    cfg = TrainConfig(lr=0.1, iterations=args.iterations, eps=args.eps)
    t0 = time.perf_counter()
    model, hist = train_classifier(model, (X, y), cfg, SamplingScheduler(cfg.iterations))
    print(f"trained {args.iterations} steps in {time.perf_counter() - t0:.1f}s; "
          f"loss {hist[0]['loss']:.4f} -> {hist[-1]['loss']:.4f}, kappa {model.kappa:.4f}")

    correct = predict(model, Xt) == yt
    print(f"clean accuracy {correct.mean():.3f}")
    rng = np.random.default_rng(1)
    certified = broken = 0
    for x, label in list(zip(Xt[correct], yt[correct]))[: args.points]:
        rep = certify_classifier(model, x, int(label), args.eps)
        if not rep.certified:
            continue
        certified += 1
        d = rng.standard_normal((1000, 2))
        d *= (args.eps * np.sqrt(rng.random(1000)) / np.linalg.norm(d, axis=1))[:, None]
        broken += int(np.any(predict(model, x + d) != label))
    print(f"certified {certified}/{min(args.points, int(correct.sum()))} at eps {args.eps}; "
          f"certified points broken by random attacks: {broken}")


if __name__ == "__main__":
    main()
