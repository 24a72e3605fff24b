"""Learning additive models of single-index features with two-layer networks."""
