"""Index directions, additive single-index targets and labeled samples."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import linalg

from .hermite import HermiteSeries, information_exponent, series_eval

__all__ = [
    "seed_sequence",
    "DirectionSet",
    "AdditiveTarget",
    "SampleBatch",
    "OverlapUnreachableError",
    "PreconditionError",
    "hypercube_overlap_bound",
    "gen_directions",
    "diversity_check",
    "orthonormalize",
    "sample_batch",
    "SampleStream",
    "sample_stream",
    "target_eval",
    "second_moment_estimate",
]

MODES = ("canonical", "sphere", "hypercube")


class OverlapUnreachableError(RuntimeError):
    """Hypercube sampling could not meet the overlap bound within the retry cap."""


class PreconditionError(ValueError):
    pass


def _max_overlap(V: np.ndarray) -> float:
    if V.shape[0] < 2:
        return 0.0
    G = np.abs(V @ V.T)
    np.fill_diagonal(G, 0.0)
    return float(G.max())


@dataclass(frozen=True, eq=False)
class DirectionSet:
    """M unit vectors in R^d (rows of ``directions``)."""

    directions: np.ndarray
    max_overlap: float
    mode: str = "custom"

    def __post_init__(self):
        V = np.array(self.directions, dtype=np.float64, ndmin=2)
        V.setflags(write=False)
        object.__setattr__(self, "directions", V)

    @classmethod
    def from_matrix(cls, V, mode: str = "custom", normalize: bool = False) -> "DirectionSet":
        V = np.array(V, dtype=np.float64, ndmin=2)
        if normalize:
            V = V / np.linalg.norm(V, axis=1, keepdims=True)
        return cls(V, _max_overlap(V), mode)

    @property
    def M(self) -> int:
        return self.directions.shape[0]

    @property
    def d(self) -> int:
        return self.directions.shape[1]

    def gram(self) -> np.ndarray:
        return self.directions @ self.directions.T


def hypercube_overlap_bound(d: int, M: int) -> float:
    """sqrt(2 log M) / sqrt(d), the pairwise overlap target for hypercube sets."""
    return math.sqrt(2.0 * math.log(M)) / math.sqrt(d) if M > 1 else 0.0


def gen_directions(d: int, M: int, mode: str = "sphere", seed=None,
                   max_retries: int = 100) -> DirectionSet:
    """Generate M unit directions in R^d.

    ``canonical`` returns e_1..e_M.  ``sphere`` draws i.i.d. uniform
    points on S^{d-1}.  ``hypercube`` draws Rademacher vectors scaled by
    1/sqrt(d) and grows the set one vector at a time, redrawing any
    candidate whose overlap with an accepted vector exceeds
    :func:`hypercube_overlap_bound`; each slot gets ``max_retries`` draws.
    """
    if M < 1 or d < 1:
        raise ValueError("need M >= 1 and d >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(seed)
    if mode == "canonical":
        if M > d:
            raise ValueError(f"M exceeds d ({M} > {d}) for canonical directions")
        V = np.eye(M, d)
    elif mode == "sphere":
        V = rng.standard_normal((M, d))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
    else:
        bound = hypercube_overlap_bound(d, M)
        scale = 1.0 / math.sqrt(d)
        V = np.empty((M, d))
        for m in range(M):
            for _ in range(max_retries):
                cand = rng.choice((-scale, scale), size=d)
                if m == 0 or np.max(np.abs(V[:m] @ cand)) <= bound + 1e-12:
                    V[m] = cand
                    break
            else:
                raise OverlapUnreachableError(
                    f"overlap target {bound:.4g} unreachable for vector {m} after {max_retries} draws"
                )
    return DirectionSet(V, _max_overlap(V), mode)


def diversity_check(dirs: DirectionSet, c_v: float) -> dict:
    """Check M <= c_v * max(1 / max_overlap, sqrt(d))."""
    if c_v <= 0:
        raise ValueError("c_v must be positive")
    inv = math.inf if dirs.max_overlap == 0.0 else 1.0 / dirs.max_overlap
    bound = c_v * max(inv, math.sqrt(dirs.d))
    return {"ok": bool(dirs.M <= bound), "bound": bound}


def orthonormalize(dirs: DirectionSet):
    """Gram-Schmidt basis with each row a combination of v_1..v_m.

    Returns ``(basis, coeffs)`` with ``basis = coeffs @ V`` and ``coeffs``
    lower triangular.  Requires ``max_overlap <= 1 / (2M)`` and asserts the
    coefficient bounds |c_{m,m'}| <= 4 eps (m' < m) and
    |1 - c_{m,m}| <= 20 M eps, where eps is the max overlap.
    """
    V = dirs.directions
    M = dirs.M
    eps = dirs.max_overlap
    if eps > 1.0 / (2 * M) + 1e-15:
        raise PreconditionError(
            f"precondition violated: max overlap {eps:.4g} > 1/(2M) = {1 / (2 * M):.4g}"
        )
    try:
        L = linalg.cholesky(V @ V.T, lower=True)
    except linalg.LinAlgError as exc:
        raise PreconditionError("rank deficiency in direction set") from exc
    coeffs = linalg.solve_triangular(L, np.eye(M), lower=True)
    basis = coeffs @ V
    off = np.abs(np.tril(coeffs, -1))
    if off.size and off.max() > 4 * eps + 1e-12:
        raise AssertionError("off-diagonal coefficient bound violated")
    if np.max(np.abs(1.0 - np.diag(coeffs))) > 20 * M * eps + 1e-12:
        raise AssertionError("diagonal coefficient bound violated")
    return basis, coeffs


@dataclass(frozen=True, eq=False)
class AdditiveTarget:
    """f_*(x) = M^{-1/2} sum_m f_m(<v_m, x>), labels y = f_* + noise_std * g.

    Links are rescaled to unit second moment on construction; links with a
    nonzero constant term are rejected, as are mixed information exponents
    unless ``force`` is set.
    """

    dirs: DirectionSet
    links: tuple
    noise_std: float = 0.0
    force: bool = False
    info_exponent: int = field(init=False)

    def __post_init__(self):
        links = tuple(
            l if isinstance(l, HermiteSeries) else HermiteSeries(l) for l in self.links
        )
        if len(links) != self.dirs.M:
            raise ValueError(f"need {self.dirs.M} links, got {len(links)}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        normed = []
        for m, link in enumerate(links):
            if link.coeffs[0] != 0.0:
                raise ValueError(f"link {m} has a nonzero constant term")
            normed.append(link.unit())
        ies = {information_exponent(l) for l in normed}
        if len(ies) > 1 and not self.force:
            raise ValueError(f"links have mixed information exponents {sorted(ies)}")
        object.__setattr__(self, "links", tuple(normed))
        object.__setattr__(self, "info_exponent", min(ies))

    @classmethod
    def uniform(cls, dirs: DirectionSet, link: HermiteSeries, noise_std: float = 0.0):
        return cls(dirs, (link,) * dirs.M, noise_std)

    @property
    def M(self) -> int:
        return self.dirs.M

    @property
    def d(self) -> int:
        return self.dirs.d

    @property
    def max_degree(self) -> int:
        return max(l.canonical().degree for l in self.links)

    def link_matrix(self, degree: int | None = None) -> np.ndarray:
        """M x (degree+1) matrix of link coefficients."""
        q = self.max_degree if degree is None else degree
        return np.stack([l.padded(q) for l in self.links])

    def projections_eval(self, proj: np.ndarray, exclude: int | None = None) -> np.ndarray:
        """f_* from precomputed projections ``proj[..., m] = <v_m, x>``."""
        out = np.zeros(proj.shape[:-1])
        for m, link in enumerate(self.links):
            if m != exclude:
                out += series_eval(link, proj[..., m])
        return out / math.sqrt(self.M)

    def __call__(self, x):
        return target_eval(self, x)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "M": self.M,
            "noise_std": self.noise_std,
            "mode": self.dirs.mode,
            "directions": self.dirs.directions.ravel().tolist(),
            "links": [l.coeffs.tolist() for l in self.links],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, obj: dict, force: bool = False) -> "AdditiveTarget":
        d, M = int(obj["d"]), int(obj["M"])
        V = np.asarray(obj["directions"], dtype=np.float64).reshape(M, d)
        dirs = DirectionSet.from_matrix(V, mode=obj.get("mode", "custom"))
        links = tuple(HermiteSeries(c) for c in obj["links"])
        return cls(dirs, links, float(obj.get("noise_std", 0.0)), force=force)

    @classmethod
    def from_json(cls, text_or_path, force: bool = False) -> "AdditiveTarget":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        return cls.from_dict(json.loads(text), force=force)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    xs: np.ndarray
    ys: np.ndarray
    seed: object = None

    def __post_init__(self):
        if self.xs.ndim != 2 or self.xs.shape[0] < 1:
            raise ValueError("xs must be a non-empty n x d matrix")
        if self.ys.shape != (self.xs.shape[0],):
            raise ValueError("xs and ys lengths disagree")

    def __len__(self):
        return self.xs.shape[0]

    def split(self, n_first: int):
        return (SampleBatch(self.xs[:n_first], self.ys[:n_first], self.seed),
                SampleBatch(self.xs[n_first:], self.ys[n_first:], self.seed))

    def to_csv(self, path) -> None:
        d = self.xs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i}" for i in range(d)] + ["y"])
            for row, y in zip(self.xs, self.ys):
                w.writerow([repr(float(v)) for v in row] + [repr(float(y))])

    @classmethod
    def from_csv(cls, path) -> "SampleBatch":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array(rows[1:], dtype=np.float64)
        return cls(data[:, :-1], data[:, -1])


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, None or an existing SeedSequence (e.g. a spawned child)."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


class SampleStream:
    """Sequential source of labeled samples for online training.

    Inputs and label noise come from separate child generators of ``seed``,
    so the concatenation of successive ``take`` calls does not depend on
    how the stream is chunked.
    """

    def __init__(self, target: AdditiveTarget, seed=None):
        sx, sn = seed_sequence(seed).spawn(2)
        self.target = target
        self._rx = np.random.default_rng(sx)
        self._rn = np.random.default_rng(sn)
        self.drawn = 0

    def take(self, n: int):
        t = self.target
        xs = self._rx.standard_normal((n, t.d))
        ys = t.projections_eval(xs @ t.dirs.directions.T)
        if t.noise_std > 0:
            ys = ys + t.noise_std * self._rn.standard_normal(n)
        self.drawn += n
        return xs, ys


def sample_stream(target: AdditiveTarget, seed, chunk: int = 65536) -> Iterator[tuple]:
    """Endless generator of (xs, ys) chunks from a :class:`SampleStream`."""
    stream = SampleStream(target, seed)
    while True:
        yield stream.take(chunk)


def sample_batch(target: AdditiveTarget, n: int, seed=None) -> SampleBatch:
    """n i.i.d. pairs x ~ N(0, I_d), y = f_*(x) + noise_std * g."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xs, ys = SampleStream(target, seed).take(n)
    return SampleBatch(xs, ys, seed)


def target_eval(target: AdditiveTarget, x) -> np.ndarray | float:
    """Noiseless f_*(x) for a vector or an n x d matrix of inputs."""
    x = np.asarray(x, dtype=np.float64)
    out = target.projections_eval(x @ target.dirs.directions.T)
    return out if out.ndim else float(out)


def second_moment_estimate(target: AdditiveTarget, n: int = 100_000, seed=None,
                           return_stderr: bool = False):
    """Monte Carlo estimate of E[f_*(x)^2]."""
    if n < 10_000:
        raise ValueError("n must be >= 1e4")
    rng = np.random.default_rng(seed)
    total, total_sq, done = 0.0, 0.0, 0
    V = target.dirs.directions
    while done < n:
        k = min(100_000, n - done)
        f2 = target.projections_eval(rng.standard_normal((k, target.d)) @ V.T) ** 2
        total += f2.sum()
        total_sq += (f2 * f2).sum()
        done += k
    mean = total / n
    if not return_stderr:
        return mean
    var = max(total_sq / n - mean * mean, 0.0)
    return mean, math.sqrt(var / n)
