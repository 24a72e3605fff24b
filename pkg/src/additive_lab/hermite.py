"""Hermite algebra over the standard Gaussian measure.

All series use the probabilists' Hermite polynomials He_k in their
*unnormalized* form, so that ``E[He_k(z) He_l(z)] = k! * delta_kl`` for
``z ~ N(0, 1)``.  Conversion helpers to the orthonormal basis
``He_k / sqrt(k!)`` are provided for I/O.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, special

__all__ = [
    "HermiteSeries",
    "QuadratureRule",
    "QuadratureError",
    "InsufficientOrderError",
    "NoPositiveDegreeError",
    "he_eval",
    "he_table",
    "series_eval",
    "inner_product",
    "second_moment",
    "gauss_quadrature",
    "split_quadrature",
    "expand_function",
    "relu_shifted_inner",
    "relu_shifted_coeffs",
    "information_exponent",
    "superorthogonality_check",
    "min_exact_order",
    "superorthogonal_k1",
    "superorthogonal_k2l2",
    "DEFAULT_ORDER",
]

DEFAULT_ORDER = 64


class QuadratureError(RuntimeError):
    """Raised when the Golub-Welsch eigen-solve fails."""


class InsufficientOrderError(ValueError):
    """Raised when a quadrature rule cannot integrate a polynomial exactly."""


class NoPositiveDegreeError(ValueError):
    """Raised when a series has no coefficient above tolerance at degree >= 1."""


def _factorials(n: int) -> np.ndarray:
    return special.factorial(np.arange(n), exact=False)


@dataclass(frozen=True, eq=False)
class HermiteSeries:
    """Finite expansion ``sum_k coeffs[k] * He_k``.

    Parameters
    ----------
    coeffs : array_like
        Coefficients on the unnormalized basis; index equals degree.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64).ravel()
        if c.size == 0:
            c = np.zeros(1)
        if not np.all(np.isfinite(c)):
            raise ValueError("Hermite coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    @classmethod
    def basis(cls, k: int, normalized: bool = False) -> "HermiteSeries":
        """He_k, or He_k / sqrt(k!) when ``normalized``."""
        c = np.zeros(k + 1)
        c[k] = 1.0 / math.sqrt(math.factorial(k)) if normalized else 1.0
        return cls(c)

    @classmethod
    def from_normalized(cls, coeffs: Sequence[float]) -> "HermiteSeries":
        """Build from coefficients on the orthonormal basis He_k / sqrt(k!)."""
        c = np.asarray(coeffs, dtype=np.float64)
        return cls(c / np.sqrt(_factorials(c.size)))

    def to_normalized(self) -> np.ndarray:
        """Coefficients on the orthonormal basis He_k / sqrt(k!)."""
        return self.coeffs * np.sqrt(_factorials(self.coeffs.size))

    def canonical(self, tol: float = 0.0) -> "HermiteSeries":
        """Drop trailing coefficients with magnitude <= tol."""
        nz = np.flatnonzero(np.abs(self.coeffs) > tol)
        if nz.size == 0:
            return HermiteSeries([0.0])
        return HermiteSeries(self.coeffs[: nz[-1] + 1])

    def is_canonical(self) -> bool:
        return self.degree == 0 or self.coeffs[-1] != 0.0

    def padded(self, degree: int) -> np.ndarray:
        """Coefficient vector zero-padded (or truncated) to ``degree + 1``."""
        out = np.zeros(degree + 1)
        n = min(degree + 1, self.coeffs.size)
        out[:n] = self.coeffs[:n]
        return out

    def second_moment(self) -> float:
        return second_moment(self)

    def scaled(self, factor: float) -> "HermiteSeries":
        return HermiteSeries(self.coeffs * factor)

    def unit(self) -> "HermiteSeries":
        """Rescale to unit second moment."""
        m2 = self.second_moment()
        if m2 <= 0.0:
            raise ValueError("cannot normalize the zero series")
        return self.scaled(1.0 / math.sqrt(m2))

    def derivative(self) -> "HermiteSeries":
        """d/dz sum c_k He_k = sum c_k k He_{k-1}."""
        if self.degree == 0:
            return HermiteSeries([0.0])
        k = np.arange(1, self.coeffs.size)
        return HermiteSeries(self.coeffs[1:] * k)

    def shift(self, b: float) -> "HermiteSeries":
        """Expansion of z -> s(z + b), via He_n(z+b) = sum_k C(n,k) b^(n-k) He_k(z)."""
        n = self.coeffs.size
        out = np.zeros(n)
        for deg in range(n):
            c = self.coeffs[deg]
            if c == 0.0:
                continue
            for k in range(deg + 1):
                out[k] += c * math.comb(deg, k) * b ** (deg - k)
        return HermiteSeries(out)

    def __call__(self, x):
        return series_eval(self, x)

    def __neg__(self):
        return self.scaled(-1.0)

    def __add__(self, other: "HermiteSeries") -> "HermiteSeries":
        n = max(self.degree, other.degree)
        return HermiteSeries(self.padded(n) + other.padded(n))

    def __sub__(self, other: "HermiteSeries") -> "HermiteSeries":
        return self + (-other)

    def __mul__(self, factor: float) -> "HermiteSeries":
        return self.scaled(float(factor))

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, HermiteSeries):
            return NotImplemented
        n = max(self.degree, other.degree)
        return bool(np.array_equal(self.padded(n), other.padded(n)))

    def __repr__(self):
        return f"HermiteSeries({self.coeffs.tolist()!r})"

    # -- serialization -------------------------------------------------
    def to_json(self) -> str:
        return json.dumps([float(c) for c in self.coeffs])

    @classmethod
    def from_json(cls, data) -> "HermiteSeries":
        if isinstance(data, (str, bytes)):
            data = json.loads(data)
        if not isinstance(data, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in data
        ):
            raise ValueError("HermiteSeries JSON must be an array of numbers")
        return cls(data)


def he_eval(k: int, x):
    """He_k(x) by the three-term recurrence He_{k+1} = x He_k - k He_{k-1}."""
    if k < 0:
        raise ValueError("degree must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    prev = np.ones_like(x)
    if k == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for n in range(1, k):
        prev, cur = cur, x * cur - n * prev
    return cur if cur.ndim else float(cur)


def he_table(kmax: int, x) -> np.ndarray:
    """Stack of He_0..He_kmax evaluated at x, shape ``(kmax + 1, *x.shape)``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = x
    for n in range(1, kmax):
        out[n + 1] = x * out[n] - n * out[n - 1]
    return out


def series_eval(s: HermiteSeries, x):
    """Evaluate ``sum_k c_k He_k(x)`` with one backward (Clenshaw) pass."""
    x = np.asarray(x, dtype=np.float64)
    c = s.coeffs
    b1 = np.zeros_like(x)
    b2 = np.zeros_like(x)
    for k in range(c.size - 1, -1, -1):
        b1, b2 = c[k] + x * b1 - (k + 1) * b2, b1
    return b1 if b1.ndim else float(b1)


def inner_product(f: HermiteSeries, g: HermiteSeries) -> float:
    """E[f(z) g(z)] for z ~ N(0, 1), exact in coefficient space."""
    n = min(f.coeffs.size, g.coeffs.size)
    return float(np.sum(_factorials(n) * f.coeffs[:n] * g.coeffs[:n]))


def second_moment(s: HermiteSeries) -> float:
    return inner_product(s, s)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes and weights integrating against the N(0, 1) density.

    ``order`` is the number of nodes.  For ``kind == "gauss"`` the rule is
    exact for polynomials of degree <= 2 * order - 1.
    """

    nodes: np.ndarray
    weights: np.ndarray
    order: int
    kind: str = "gauss"

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))

    def expect(self, h: Callable) -> float:
        return self.integrate(h(self.nodes))


def _orthonormal_sq_sum(x: np.ndarray, n: int) -> np.ndarray:
    # Christoffel function: sum_{k<n} (He_k(x)/sqrt(k!))^2
    p_prev = np.zeros_like(x)
    p = np.ones_like(x)
    acc = p * p
    for k in range(n - 1):
        p_prev, p = p, (x * p - math.sqrt(k) * p_prev) / math.sqrt(k + 1)
        acc += p * p
    return acc


def gauss_quadrature(n: int = DEFAULT_ORDER) -> QuadratureRule:
    """Gauss rule for the standard normal density (Golub-Welsch).

    Nodes are eigenvalues of the symmetric Jacobi matrix with zero
    diagonal and off-diagonal ``sqrt(k)``; weights come from the
    Christoffel function, which equals the squared first eigenvector
    component but stays accurate in the tails.
    """
    if not 1 <= n <= 256:
        raise ValueError("quadrature order must lie in [1, 256]")
    if n == 1:
        return QuadratureRule(np.zeros(1), np.ones(1), 1)
    off = np.sqrt(np.arange(1, n, dtype=np.float64))
    try:
        nodes = linalg.eigh_tridiagonal(np.zeros(n), off, eigvals_only=True)
    except linalg.LinAlgError as exc:
        raise QuadratureError(f"Jacobi eigen-solve failed for n={n}") from exc
    if not np.all(np.isfinite(nodes)):
        raise QuadratureError(f"non-finite nodes for n={n}")
    nodes = np.sort(nodes)
    nodes = 0.5 * (nodes - nodes[::-1])  # exact symmetry about 0
    weights = 1.0 / _orthonormal_sq_sum(nodes, n)
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(nodes, weights, n)


def split_quadrature(breakpoints: Sequence[float] = (), n_per_panel: int = 96,
                     span: float = 14.0) -> QuadratureRule:
    """Composite Gauss-Legendre rule for N(0, 1) with panels split at breakpoints.

    Use for integrands with kinks (e.g. ReLU) where a Gauss-Hermite rule
    converges only algebraically.  Mass beyond ``|x| > span`` is dropped
    (about 1e-44 for the default).
    """
    cuts = sorted({-span, span, *(float(b) for b in breakpoints if -span < b < span)})
    t, w = np.polynomial.legendre.leggauss(n_per_panel)
    nodes, weights = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        x = 0.5 * (hi - lo) * t + 0.5 * (hi + lo)
        nodes.append(x)
        weights.append(0.5 * (hi - lo) * w * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi))
    nodes = np.concatenate(nodes)
    return QuadratureRule(nodes, np.concatenate(weights), nodes.size, kind="split")


def expand_function(h: Callable, q: int, rule: QuadratureRule | None = None) -> HermiteSeries:
    """Hermite coefficients c_k = E[h(z) He_k(z)] / k! for k <= q."""
    if rule is None:
        rule = gauss_quadrature(max(DEFAULT_ORDER, q + 1))
    if rule.kind == "gauss" and rule.order < q + 1:
        raise InsufficientOrderError(f"rule order {rule.order} < q + 1 = {q + 1}")
    hv = np.asarray(h(rule.nodes), dtype=np.float64)
    table = he_table(q, rule.nodes)
    moments = table @ (rule.weights * hv)
    return HermiteSeries(moments / _factorials(q + 1))


def relu_shifted_inner(b: float, i: int) -> float:
    """E[ReLU(z + b) He_i(z)] for z ~ N(0, 1), in closed form."""
    phi = math.exp(-0.5 * b * b) / math.sqrt(2 * math.pi)
    if i == 0:
        return b * special.ndtr(b) + phi
    if i == 1:
        return float(special.ndtr(b))
    return (-1) ** i * phi * he_eval(i - 2, b)


def relu_shifted_coeffs(b: float, q: int) -> HermiteSeries:
    """Hermite expansion of z -> ReLU(z + b) up to degree q."""
    if q < 2:
        raise ValueError("cutoff degree must be >= 2")
    inner = np.array([relu_shifted_inner(b, i) for i in range(q + 1)])
    return HermiteSeries(inner / _factorials(q + 1))


def information_exponent(s: HermiteSeries, tol: float = 1e-9) -> int:
    """Smallest k >= 1 with |c_k| > tol."""
    idx = np.flatnonzero(np.abs(s.coeffs[1:]) > tol)
    if idx.size == 0:
        raise NoPositiveDegreeError("no positive-degree coefficient above tolerance")
    return int(idx[0] + 1)


def min_exact_order(f_degree: int, K: int, L: int) -> int:
    """Smallest order accepted by :func:`superorthogonality_check`."""
    return math.ceil((K * f_degree + L) / 2) + 1


def superorthogonality_check(f: HermiteSeries, K: int, L: int,
                             rule: QuadratureRule | None = None) -> np.ndarray:
    """Residuals r[k-1, l-1] = E[f(z)^k He_l(z)] for 1 <= k <= K, 1 <= l <= L.

    Refuses to run when the rule is not exact for degree ``K * deg(f) + L``.
    """
    f = f.canonical()
    need = min_exact_order(f.degree, K, L)
    if rule is None:
        rule = gauss_quadrature(need)
    if rule.kind != "gauss" or rule.order < need:
        raise InsufficientOrderError(
            f"insufficient quadrature order: need a Gauss rule of order >= {need}, got {rule.order}"
        )
    fv = series_eval(f, rule.nodes)
    he = he_table(L, rule.nodes)[1:]
    out = np.empty((K, L))
    power = np.ones_like(fv)
    for k in range(K):
        power = power * fv
        out[k] = he @ (rule.weights * power)
    return out


def superorthogonal_k2l2() -> HermiteSeries:
    """Degree-20 polynomial f with E[f^k He_l] = 0 for k, l in {1, 2}.

    Its even-degree coefficients start at He_4, so both f and f^2 are
    orthogonal to He_1 and He_2.
    """
    c = np.zeros(21)
    c[4] = 1.0
    c[6] = -4 / 15
    c[8] = 11 / 280
    c[10] = -19 / 4725
    c[12] = 311 / 997920
    c[14] = -719 / 37837800
    c[16] = 14297 / 15567552000
    c[18] = -35369 / 1042053012000
    c[20] = 35369 / 41682120480000 - math.sqrt(11163552839 / 38) / 83364240960000
    return HermiteSeries(c)


def superorthogonal_k1(L: int) -> HermiteSeries:
    """He_{L+1}, orthogonal to He_1..He_L (the K = 1 case)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    return HermiteSeries.basis(L + 1)
