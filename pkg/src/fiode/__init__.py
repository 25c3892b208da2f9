"""Train and certify forward-invariant neural ODEs."""
