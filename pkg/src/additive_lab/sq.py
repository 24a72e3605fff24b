"""Statistical-query oracles, near-orthogonal hard classes and the
closed-form bounds for the polynomial-growth recursion."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .hermite import HermiteSeries, series_eval
from .targets import (
    AdditiveTarget,
    DirectionSet,
    SampleStream,
    gen_directions,
    hypercube_overlap_bound,
    seed_sequence,
)

__all__ = [
    "BudgetExhaustedError",
    "QueryNotNormalizedError",
    "CoherenceError",
    "OracleConfig",
    "DirectionalQuery",
    "ClassQuery",
    "HardClass",
    "csq_query",
    "sq_query",
    "build_hard_class",
    "correlation_census",
    "census_bound",
    "bihari_lasalle_bounds",
]

NOISE_MODES = ("none", "adversarial_hide", "clipped_gaussian")


class BudgetExhaustedError(RuntimeError):
    pass


class QueryNotNormalizedError(ValueError):
    pass


class CoherenceError(ValueError):
    """tau^2 does not exceed the class coherence, so the census bound is void."""


@dataclass
class OracleConfig:
    """Tolerance, noise policy and query budget; the counter is mutable state.

    ``clipped_gaussian`` adds clamp(N(0, sigma^2), -tau, tau).
    ``adversarial_hide`` moves the answer by at most tau toward the answer
    the target would give with task ``hide_task`` removed.
    """

    tau: float = 0.0
    noise_mode: str = "none"
    sigma: float = 0.0
    budget: int = 1_000
    hide_task: int = 0
    query_count: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")

    def charge(self) -> None:
        if self.query_count >= self.budget:
            raise BudgetExhaustedError(f"query budget {self.budget} exhausted")
        self.query_count += 1

    @property
    def remaining(self) -> int:
        return self.budget - self.query_count


@dataclass(frozen=True, eq=False)
class DirectionalQuery:
    """g(x) = h(<u, x>) for a Hermite series h and a unit direction u."""

    series: HermiteSeries
    direction: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError("query direction must have unit norm")
        object.__setattr__(self, "direction", u)

    def norm_sq(self) -> float:
        return self.series.second_moment()

    def __call__(self, X):
        return series_eval(self.series, np.asarray(X) @ self.direction)


@dataclass(frozen=True, eq=False)
class ClassQuery:
    """Linear combination sum_a c_a phi_a of hard-class members."""

    coeffs: np.ndarray


def _exact_corr(target: AdditiveTarget, g: DirectionalQuery, exclude: int | None = None) -> float:
    """E[f_*(x) h(<u,x>)] via E[He_k(v.x) He_l(u.x)] = k! (u.v)^k delta_kl."""
    h = g.series.coeffs
    total = 0.0
    for m, link in enumerate(target.links):
        if m == exclude:
            continue
        c = link.coeffs
        n = min(len(c), len(h))
        uv = float(target.dirs.directions[m] @ g.direction)
        k = np.arange(n)
        fact = np.array([math.factorial(int(i)) for i in k], dtype=np.float64)
        total += float(np.sum(c[:n] * h[:n] * fact * uv ** k))
    return total / math.sqrt(target.M)


def _noise(cfg: OracleConfig, true: float, hidden: float | None, rng) -> float:
    if cfg.noise_mode == "none":
        return 0.0
    if cfg.noise_mode == "clipped_gaussian":
        return float(np.clip(cfg.sigma * rng.standard_normal(), -cfg.tau, cfg.tau))
    return float(np.clip(hidden - true, -cfg.tau, cfg.tau))


def csq_query(target: AdditiveTarget, g, cfg: OracleConfig, seed=None, n: int = 1_000_000,
              norm_tol: float = 1e-2, return_stderr: bool = False):
    """Correlational query E[y g(x)] answered within tolerance tau.

    A :class:`DirectionalQuery` is answered exactly from Hermite
    coefficients; any other callable g(X) is estimated by Monte Carlo on
    ``n`` samples, whose standard error is separate from tau.
    """
    if not 0 <= cfg.hide_task < target.M and cfg.noise_mode == "adversarial_hide":
        raise ValueError("hide_task out of range")
    rng = np.random.default_rng(seed)
    if isinstance(g, DirectionalQuery):
        if abs(g.norm_sq() - 1.0) > norm_tol:
            raise QueryNotNormalizedError(f"E[g^2] = {g.norm_sq():.4g}, expected 1")
        cfg.charge()
        true = _exact_corr(target, g)
        hidden = _exact_corr(target, g, exclude=cfg.hide_task)
        se = 0.0
    else:
        s_mc, rng = seed_sequence(seed).spawn(2)
        rng = np.random.default_rng(rng)
        stream = SampleStream(target, s_mc)
        V = target.dirs.directions
        acc = np.zeros(4)
        done = 0
        while done < n:
            k = min(200_000, n - done)
            X, Y = stream.take(k)
            gx = np.asarray(g(X), dtype=np.float64)
            drop = series_eval(target.links[cfg.hide_task], X @ V[cfg.hide_task]) / math.sqrt(target.M)
            acc += [np.sum(gx * gx), np.sum(Y * gx), np.sum((Y * gx) ** 2), np.sum((Y - drop) * gx)]
            done += k
        if abs(acc[0] / n - 1.0) > norm_tol:
            raise QueryNotNormalizedError(f"estimated E[g^2] = {acc[0] / n:.4g}, expected 1")
        cfg.charge()
        true = acc[1] / n
        hidden = acc[3] / n
        se = math.sqrt(max(acc[2] / n - true * true, 0.0) / n)
    out = true + _noise(cfg, true, hidden, rng)
    return (out, se) if return_stderr else out


def sq_query(target: AdditiveTarget, g: Callable, cfg: OracleConfig, seed=None,
             n: int = 1_000_000, return_stderr: bool = False):
    """Statistical query E[g(x, y)] with g clipped to [-1, 1], by Monte Carlo."""
    if not 0 <= cfg.hide_task < target.M and cfg.noise_mode == "adversarial_hide":
        raise ValueError("hide_task out of range")
    cfg.charge()
    s_mc, s_noise = seed_sequence(seed).spawn(2)
    stream = SampleStream(target, s_mc)
    V = target.dirs.directions
    s1 = s2 = sh = 0.0
    done = 0
    while done < n:
        k = min(200_000, n - done)
        X, Y = stream.take(k)
        v = np.clip(np.asarray(g(X, Y), dtype=np.float64), -1.0, 1.0)
        s1 += v.sum()
        s2 += (v * v).sum()
        if cfg.noise_mode == "adversarial_hide":
            drop = series_eval(target.links[cfg.hide_task], X @ V[cfg.hide_task]) / math.sqrt(target.M)
            sh += np.clip(np.asarray(g(X, Y - drop), dtype=np.float64), -1.0, 1.0).sum()
        done += k
    true = s1 / n
    se = math.sqrt(max(s2 / n - true * true, 0.0) / n)
    out = true + _noise(cfg, true, sh / n, np.random.default_rng(s_noise))
    return (out, se) if return_stderr else out


@dataclass(frozen=True, eq=False)
class HardClass:
    """Functions phi_a(x) = He_p(<v_a, x>) / sqrt(p!) over hypercube directions."""

    p: int
    dirs: DirectionSet

    @property
    def A(self) -> int:
        return self.dirs.M

    @property
    def overlap_bound(self) -> float:
        return hypercube_overlap_bound(self.dirs.d, self.A)

    def correlations(self) -> np.ndarray:
        """A x A matrix of E[phi_a phi_b] = (v_a.v_b)^p."""
        return self.dirs.gram() ** self.p

    def coherence(self) -> float:
        C = np.abs(self.correlations())
        np.fill_diagonal(C, 0.0)
        return float(C.max()) if self.A > 1 else 0.0

    def member(self, a: int) -> DirectionalQuery:
        return DirectionalQuery(HermiteSeries.basis(self.p, normalized=True), self.dirs.directions[a])

    def to_target(self) -> AdditiveTarget:
        """The whole class as one additive target, one member per link."""
        link = HermiteSeries.basis(self.p, normalized=True)
        return AdditiveTarget(self.dirs, (link,) * self.A)

    def to_json(self, path=None) -> str:
        return self.to_target().to_json(path)


def build_hard_class(d: int, A: int, p: int, seed=None, max_retries: int = 100) -> HardClass:
    """Hypercube class with pairwise overlap <= sqrt(2 log A / d)."""
    if A < 2:
        raise ValueError("A must be >= 2")
    if p < 1:
        raise ValueError("p must be >= 1")
    dirs = gen_directions(d, A, "hypercube", seed, max_retries)
    cls = HardClass(p, dirs)
    if dirs.max_overlap > cls.overlap_bound + 1e-12:
        raise AssertionError("hypercube class violates its overlap bound")
    return cls


def census_bound(tau: float, eps: float) -> float:
    """2 / (tau^2 - eps): at most 1/(tau^2 - eps) members per sign."""
    if tau * tau <= eps:
        raise CoherenceError(f"tau^2 = {tau * tau:.4g} does not exceed class coherence {eps:.4g}")
    return 2.0 / (tau * tau - eps)


@dataclass
class CensusResult:
    count: int
    bound: float
    tau: float
    coherence: float
    members: list = field(default_factory=list)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.__dict__, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def correlation_census(g, cls: HardClass, tau: float, norm_tol: float = 1e-9) -> CensusResult:
    """Count class members phi_a with |E[phi_a g]| >= tau, exactly.

    ``g`` is a :class:`DirectionalQuery` or a :class:`ClassQuery`; it must
    have unit L2 norm.  The count is checked against 2 / (tau^2 - eps),
    eps being the class coherence.
    """
    eps = cls.coherence()
    bound = census_bound(tau, eps)
    if isinstance(g, DirectionalQuery):
        if abs(g.norm_sq() - 1.0) > norm_tol:
            raise QueryNotNormalizedError(f"E[g^2] = {g.norm_sq():.4g}, expected 1")
        hp = g.series.padded(cls.p)[cls.p]
        corr = hp * math.sqrt(math.factorial(cls.p)) * (cls.dirs.directions @ g.direction) ** cls.p
    elif isinstance(g, ClassQuery):
        C = cls.correlations()
        c = np.asarray(g.coeffs, dtype=np.float64)
        nsq = float(c @ C @ c)
        if abs(nsq - 1.0) > norm_tol:
            raise QueryNotNormalizedError(f"E[g^2] = {nsq:.4g}, expected 1")
        corr = C @ c
    else:
        raise TypeError("census queries must be DirectionalQuery or ClassQuery")
    hits = np.flatnonzero(np.abs(corr) >= tau)
    if len(hits) > bound:
        raise AssertionError(f"census count {len(hits)} exceeds bound {bound:.4g}")
    return CensusResult(int(len(hits)), float(bound), float(tau), eps, [int(i) for i in hits])


def bihari_lasalle_bounds(a0: float, c: float, p: int, T: int, form: str = "published") -> dict:
    """Trajectory of a^{t+1} = a^t + c (a^t)^(p-1) with closed-form envelopes.

    ``published`` returns
        lower_t = a0 / (1 - c (p-2) a0^(p-2) t)^(1/(p-2))
        upper_t = a0 / (1 - c (1+c)^(p-1) (p-2) a0^(p-2) t)^(1/(p-2)).
    ``corrected`` returns
        lower_t = a0 / (1 - c (1+c)^-(p-1) (p-2) a0^(p-2) t)^(1/(p-2))
        upper_t = a0 / (1 - c (p-2) a0^(p-2) t)^(1/(p-2)),
    which is the ordering the integral comparison actually gives: the
    forward recursion grows slower than the continuous solution.

    Envelope entries are NaN where a denominator is non-positive.  The
    recursion stops one step after it first exceeds 1, since the envelopes
    make no claim beyond that; later entries of every array are NaN.
    """
    if not 0 < a0 < 1:
        raise ValueError("a0 must lie in (0, 1)")
    if c < 0 or p < 3 or T < 0:
        raise ValueError("need c >= 0, p >= 3, T >= 0")
    if form not in ("published", "corrected"):
        raise ValueError("form must be 'published' or 'corrected'")
    vals = [a0]
    a, q = a0, p - 1
    for _ in range(T):
        if a > 1.0:
            break  # past this point the envelopes make no claim
        a = a + c * a**q
        vals.append(a)
    seq = np.full(T + 1, np.nan)
    seq[: len(vals)] = vals
    t = np.arange(T + 1, dtype=np.float64)
    k = p - 2
    base = k * a0 ** k * t

    def env(rate):
        den = 1.0 - rate * base
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a0 / den ** (1.0 / k)
        return np.where(den > 0, out, np.nan)

    slow = env(c)
    if form == "published":
        lower, upper = slow, env(c * (1 + c) ** (p - 1))
    else:
        lower, upper = env(c * (1 + c) ** -(p - 1)), slow
    # valid while a^s <= 1 for all s <= t - 1
    exceeded = np.isnan(seq)
    lower = np.where(exceeded, np.nan, lower)
    upper = np.where(exceeded, np.nan, upper)
    return {"sequence": seq, "lower": lower, "upper": upper, "form": form}
