"""Two-layer student network f(x) = (1/J) sum_j a_j sigma_j(<w_j, x> + b_j)."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .hermite import HermiteSeries, relu_shifted_coeffs, series_eval, he_table
from .targets import AdditiveTarget

__all__ = [
    "ActivationSpec",
    "NetworkState",
    "init_network",
    "forward",
    "features",
    "neuron_expansion",
    "descent_path_check",
    "descent_path_margins",
    "save_network",
    "load_network",
]

_NORMALIZATIONS = ("sqrt_i", "sqrt_factorial")
_MAGIC = b"ADDLNET1"


@dataclass(frozen=True, eq=False)
class ActivationSpec:
    """Student nonlinearity.

    ``relu`` is shared by all neurons.  ``randomized_poly`` gives neuron j
    the activation sum_{i=p}^{q} signs[j, i-p] / norm_i * He_i(z) with
    signs uniform on {-1, 0, +1} and norm_i = sqrt(i) (``sqrt_i``) or
    sqrt(i!) (``sqrt_factorial``).
    """

    kind: str = "relu"
    p: int = 0
    q: int = 0
    signs: np.ndarray | None = None
    normalization: str = "sqrt_i"

    def __post_init__(self):
        if self.kind not in ("relu", "randomized_poly"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "randomized_poly":
            if not 1 <= self.p <= self.q:
                raise ValueError("randomized_poly needs 1 <= p <= q")
            if self.normalization not in _NORMALIZATIONS:
                raise ValueError(f"normalization must be one of {_NORMALIZATIONS}")
            if self.signs is not None:
                s = np.asarray(self.signs, dtype=np.int8)
                if s.ndim != 2 or s.shape[1] != self.q - self.p + 1:
                    raise ValueError("signs must be J x (q - p + 1)")
                if not np.all(np.isin(s, (-1, 0, 1))):
                    raise ValueError("signs must lie in {-1, 0, +1}")
                s.setflags(write=False)
                object.__setattr__(self, "signs", s)

    @classmethod
    def relu(cls) -> "ActivationSpec":
        return cls("relu")

    @classmethod
    def randomized_poly(cls, p: int, q: int, signs=None,
                        normalization: str = "sqrt_i") -> "ActivationSpec":
        return cls("randomized_poly", p, q, signs, normalization)

    def with_signs(self, J: int, rng: np.random.Generator) -> "ActivationSpec":
        """Draw the per-neuron sign table if it is missing."""
        if self.kind != "randomized_poly" or self.signs is not None:
            return self
        signs = rng.integers(-1, 2, size=(J, self.q - self.p + 1), dtype=np.int8)
        return replace(self, signs=signs)

    def degree_scale(self) -> np.ndarray:
        i = np.arange(self.p, self.q + 1)
        if self.normalization == "sqrt_i":
            return 1.0 / np.sqrt(i)
        return 1.0 / np.sqrt([math.factorial(k) for k in i])

    def coeff_table(self) -> np.ndarray:
        """J x (q+1) Hermite coefficients of sigma_j (polynomial kinds only)."""
        if self.kind != "randomized_poly" or self.signs is None:
            raise ValueError("coefficient table only exists for randomized_poly with signs")
        J = self.signs.shape[0]
        out = np.zeros((J, self.q + 1))
        out[:, self.p:] = self.signs * self.degree_scale()
        return out


@dataclass(frozen=True, eq=False)
class NetworkState:
    """Parameters Theta = (a_j, w_j, b_j) plus activation and bias range."""

    a: np.ndarray
    W: np.ndarray
    b: np.ndarray
    act: ActivationSpec
    C_b: float = 1.0

    @property
    def J(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def copy(self, **changes) -> "NetworkState":
        fields = {"a": self.a.copy(), "W": self.W.copy(), "b": self.b.copy()}
        fields.update(changes)
        return replace(self, **fields)

    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.W, axis=1)

    def subset(self, idx) -> "NetworkState":
        """Network restricted to neurons ``idx`` (keeps their parameters)."""
        idx = np.atleast_1d(idx)
        act = self.act
        if act.signs is not None:
            act = replace(act, signs=act.signs[idx])
        return NetworkState(self.a[idx].copy(), self.W[idx].copy(), self.b[idx].copy(), act, self.C_b)

    def __call__(self, x):
        return forward(self, x)


def init_network(J: int, d: int, act: ActivationSpec | None = None, C_b: float = 1.0,
                 seed=None, bias: str = "zero") -> NetworkState:
    """Random initialization.

    Rows of W are uniform on S^{d-1}, a_j uniform on {-1, +1}.  Biases are
    zero (``bias="zero"``) or uniform on [-C_b, C_b] (``bias="uniform"``).
    """
    if J < 1 or d < 1 or C_b < 0:
        raise ValueError("need J >= 1, d >= 1, C_b >= 0")
    if bias not in ("zero", "uniform"):
        raise ValueError("bias must be 'zero' or 'uniform'")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((J, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    a = rng.choice((-1.0, 1.0), size=J)
    b = rng.uniform(-C_b, C_b, size=J) if bias == "uniform" else np.zeros(J)
    act = (act or ActivationSpec.relu()).with_signs(J, rng)
    return NetworkState(a, W, b, act, float(C_b))


def activation_values(act: ActivationSpec, z: np.ndarray) -> np.ndarray:
    """sigma_j(z[..., j]) for pre-activations with neurons on the last axis."""
    if act.kind == "relu":
        return np.maximum(z, 0.0)
    C = act.coeff_table()
    he = he_table(act.q, z)
    return np.einsum("k...j,jk->...j", he, C)


def activation_derivs(act: ActivationSpec, z: np.ndarray) -> np.ndarray:
    """sigma_j'(z[..., j]); the ReLU derivative at 0 is taken as 0."""
    if act.kind == "relu":
        return (z > 0.0).astype(np.float64)
    C = act.coeff_table()
    D = C[:, 1:] * np.arange(1, act.q + 1)
    he = he_table(act.q - 1, z)
    return np.einsum("k...j,jk->...j", he, D)


def features(net: NetworkState, X) -> np.ndarray:
    """n x J matrix sigma_j(<w_j, x> + b_j)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return activation_values(net.act, X @ net.W.T + net.b)


def forward(net: NetworkState, x):
    """(1/J) sum_j a_j sigma_j(<w_j, x> + b_j) for a vector or n x d matrix."""
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    rows = max(1, 2**22 // net.J)
    out = np.concatenate([features(net, X[i:i + rows]) @ net.a
                          for i in range(0, X.shape[0], rows)]) / net.J
    return float(out[0]) if x.ndim == 1 else out


def neuron_expansion(net: NetworkState, j: int, q: int) -> HermiteSeries:
    """Hermite expansion of z -> a_j sigma_j(z + b_j) up to degree q."""
    if not 0 <= j < net.J:
        raise IndexError(f"neuron index {j} out of range")
    if net.act.kind == "relu":
        s = relu_shifted_coeffs(float(net.b[j]), max(q, 2))
        s = HermiteSeries(s.coeffs[: q + 1])
    else:
        s = HermiteSeries(net.act.coeff_table()[j]).shift(float(net.b[j]))
        s = HermiteSeries(s.padded(q))
    return s.scaled(float(net.a[j]))


def descent_path_margins(net: NetworkState, target: AdditiveTarget) -> np.ndarray:
    """J x M margins min(alpha_p beta_p, min_{p<i<=q} alpha_i beta_i).

    Products use orthonormal-basis coefficients; a positive margin means the
    sign condition holds strictly at degree p.
    """
    p, q = target.info_exponent, target.max_degree
    alpha = np.stack([HermiteSeries(l.padded(q)).to_normalized() for l in target.links])
    beta = np.stack([neuron_expansion(net, j, q).to_normalized() for j in range(net.J)])
    prod = beta[:, None, p:] * alpha[None, :, p:]  # J x M x (q-p+1)
    lead = prod[..., 0]
    if q > p:
        rest = np.minimum(prod[..., 1:].min(axis=-1), 0.0)
        return np.where(rest < 0.0, rest, lead)
    return lead


def descent_path_check(net: NetworkState, target: AdditiveTarget,
                       return_margin: bool = False):
    """Entry (j, m) is True when alpha_{m,p} beta_{j,p} > 0 and
    alpha_{m,i} beta_{j,i} >= 0 for p < i <= q."""
    margin = descent_path_margins(net, target)
    ok = margin > 0.0
    return (ok, margin) if return_margin else ok


# -- binary checkpoint format -------------------------------------------
# header: magic, <IIB d (J, d, kind), C_b, then p, q, normalization byte;
# body: W row-major, a, b as little-endian float64, then the int8 sign table.

def _meta(net: NetworkState) -> dict:
    return {
        "J": net.J,
        "d": net.d,
        "activation": net.act.kind,
        "C_b": net.C_b,
        "p": net.act.p,
        "q": net.act.q,
        "normalization": net.act.normalization,
    }


def save_network(net: NetworkState, path) -> Path:
    """Write the binary checkpoint and a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    kind = 0 if net.act.kind == "relu" else 1
    norm = _NORMALIZATIONS.index(net.act.normalization)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIBdIIB", net.J, net.d, kind, net.C_b, net.act.p, net.act.q, norm))
        fh.write(np.ascontiguousarray(net.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(net.a, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(net.b, dtype="<f8").tobytes())
        if kind == 1:
            fh.write(np.ascontiguousarray(net.act.signs, dtype=np.int8).tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(_meta(net), indent=2))
    return sidecar


def load_network(path) -> NetworkState:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    off = len(_MAGIC)
    fmt = "<IIBdIIB"
    J, d, kind, C_b, p, q, norm = struct.unpack_from(fmt, raw, off)
    off += struct.calcsize(fmt)

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    W = take(J * d, "<f8").reshape(J, d).astype(np.float64)
    a = take(J, "<f8").astype(np.float64)
    b = take(J, "<f8").astype(np.float64)
    if kind == 0:
        act = ActivationSpec.relu()
    else:
        signs = take(J * (q - p + 1), np.int8).reshape(J, q - p + 1)
        act = ActivationSpec.randomized_poly(p, q, signs, _NORMALIZATIONS[norm])
    return NetworkState(a, W, b, act, C_b)
