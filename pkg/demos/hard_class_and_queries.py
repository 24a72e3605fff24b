"""
Near-orthogonal hard classes and query oracles
==============================================

A class of He_3 ridge functions on random hypercube directions has tiny
pairwise correlations, so a single correlational query can only be
informative about a handful of its members.
"""

import numpy as np

from additive_lab.hermite import HermiteSeries
from additive_lab.sq import (
    DirectionalQuery,
    OracleConfig,
    bihari_lasalle_bounds,
    build_hard_class,
    correlation_census,
    csq_query,
)

cls = build_hard_class(d=256, A=64, p=3, seed=0)
print(f"max overlap {cls.dirs.max_overlap:.4f} (bound {cls.overlap_bound:.4f})")
print(f"max pairwise correlation {cls.coherence():.2e}")

# %%
# Census: how many members correlate with a random unit query above tau?
rng = np.random.default_rng(0)
basis = HermiteSeries.basis(3, normalized=True)
for tau in (0.1, 0.2, 0.5):
    counts = []
    for _ in range(50):
        u = rng.standard_normal(256)
        counts.append(correlation_census(DirectionalQuery(basis, u / np.linalg.norm(u)), cls, tau).count)
    r = correlation_census(cls.member(0), cls, tau)
    print(f"tau {tau}: random queries hit at most {max(counts)}, member 0 hits {r.count}, "
          f"bound {r.bound:.1f}")

# %%
# The oracle answers exactly for ridge-function queries.  The adversary may
# shift each answer by up to tau toward what the target would return with
# one task removed.
target = cls.to_target()
g = cls.member(3)
honest = csq_query(target, g, OracleConfig())
hiding = csq_query(target, g, OracleConfig(tau=0.2, noise_mode="adversarial_hide", hide_task=3))
print(f"E[y g] = {honest:.4f}; adversarial answer {hiding:.4f}")

# %%
# The alignment recursion a <- a + c a^(p-1) and its closed-form envelopes.
# The discrete recursion grows more slowly than its continuous counterpart,
# so the continuous solution bounds it from above, not below.
out = bihari_lasalle_bounds(0.1, 0.01, 3, 100, form="corrected")
print(f"t=100: lower {out['lower'][100]:.7f} <= recursion {out['sequence'][100]:.7f} "
      f"<= upper {out['upper'][100]:.7f}")
