"""Alignment and localization measurements, and population error estimates."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .network import NetworkState
from .targets import AdditiveTarget, DirectionSet

__all__ = [
    "AlignmentTrace",
    "LocalizationReport",
    "PopulationError",
    "TraceCSVWriter",
    "alignment_matrix",
    "initialization_classes",
    "init_constant",
    "localization_report",
    "localized_tasks",
    "population_error",
    "emit_scatter",
    "read_scatter",
    "config_hash",
    "relative_movement",
]

_FMT = "%.17g"


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def alignment_matrix(net: NetworkState, dirs: DirectionSet, normalize: bool = False) -> np.ndarray:
    """J x M matrix kappa[j, m] = <w_j, v_m>.

    With ``normalize`` the rows of W are divided by their norms first,
    which is what lazy-regime runs need since their rows leave the sphere.
    """
    W = net.W
    if normalize:
        W = W / np.linalg.norm(W, axis=1, keepdims=True)
    return W @ dirs.directions.T


@dataclass
class AlignmentTrace:
    """Snapshots of the alignment matrix over training steps."""

    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def record(self, step: int, kappa: np.ndarray) -> None:
        self.times.append(int(step))
        self.snapshots.append(np.array(kappa, dtype=np.float64))

    @property
    def first(self) -> np.ndarray:
        return self.snapshots[0]

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    def max_abs(self) -> float:
        return max(float(np.abs(s).max()) for s in self.snapshots)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = TraceCSVWriter(fh)
            for t, k in zip(self.times, self.snapshots):
                writer(t, k)

    @classmethod
    def from_csv(cls, path) -> "AlignmentTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        trace = cls()
        if not rows:
            return trace
        steps = sorted({int(r["step"]) for r in rows})
        J = max(int(r["j"]) for r in rows) + 1
        M = max(int(r["m"]) for r in rows) + 1
        by_step = {t: np.zeros((J, M)) for t in steps}
        for r in rows:
            by_step[int(r["step"])][int(r["j"]), int(r["m"])] = float(r["kappa"])
        for t in steps:
            trace.record(t, by_step[t])
        return trace


class TraceCSVWriter:
    """Streams snapshots to CSV with columns step, j, m, kappa."""

    def __init__(self, fh):
        self._w = csv.writer(fh)
        self._w.writerow(["step", "j", "m", "kappa"])

    def __call__(self, step: int, kappa: np.ndarray) -> None:
        J, M = kappa.shape
        for j in range(J):
            for m in range(M):
                self._w.writerow([step, j, m, _FMT % kappa[j, m]])


def init_constant(target: AdditiveTarget) -> float:
    """C_p = (max_m |alpha_{m,p}| / min_m |alpha_{m,p}|)^(2/(p-2))."""
    p = target.info_exponent
    if p <= 2:
        raise ValueError("initialization classes need information exponent p > 2")
    lead = np.abs([l.padded(p)[p] for l in target.links])
    return float((lead.max() / lead.min()) ** (2.0 / (p - 2)))


def initialization_classes(net: NetworkState, target: AdditiveTarget, delta: float) -> list:
    """Index sets J_m of neurons whose initial alignment favors task m.

    j is in J_m when kappa_jm >= 1/sqrt(d) and
    kappa_jm^(p-2) >= C_p^((p-2)/2) max_{m' != m} |kappa_jm'|^(p-2) + delta d^(-(p-2)/2).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    p, d = target.info_exponent, net.d
    Cp = init_constant(target)
    K = alignment_matrix(net, target.dirs)
    A = np.abs(K) ** (p - 2)
    out = []
    for m in range(target.M):
        others = np.delete(A, m, axis=1)
        rival = others.max(axis=1) if others.shape[1] else np.zeros(net.J)
        pos = np.maximum(K[:, m], 0.0)
        ok = (K[:, m] >= 1.0 / math.sqrt(d)) & (
            pos ** (p - 2) >= Cp ** ((p - 2) / 2) * rival + delta * d ** (-(p - 2) / 2)
        )
        out.append(np.flatnonzero(ok))
    return out


@dataclass
class LocalizationReport:
    threshold: float
    J_min: int
    sign_sensitive: bool
    counts: list
    argmax_task: list
    top_two_gap: list
    satisfied: bool
    meta: dict = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def localization_report(trace: AlignmentTrace, threshold: float = 0.9, J_min: int = 1,
                        sign_sensitive: bool = False, meta: dict | None = None) -> LocalizationReport:
    """Per-task counts of neurons with kappa >= threshold at the last snapshot.

    Sign-insensitive mode (the default) compares |kappa| instead.
    """
    if not 0 < threshold:
        raise ValueError("threshold must be positive")
    K = trace.final
    S = K if sign_sensitive else np.abs(K)
    counts = (S >= threshold).sum(axis=0)
    order = np.sort(np.abs(K), axis=1)
    gap = order[:, -1] - (order[:, -2] if K.shape[1] > 1 else 0.0)
    return LocalizationReport(
        threshold=float(threshold),
        J_min=int(J_min),
        sign_sensitive=bool(sign_sensitive),
        counts=[int(c) for c in counts],
        argmax_task=[int(m) for m in np.argmax(np.abs(K), axis=1)],
        top_two_gap=[float(g) for g in gap],
        satisfied=bool(np.all(counts >= J_min)),
        meta=dict(meta or {}),
    )


def localized_tasks(kappa: np.ndarray, hi: float = 0.9, lo: float = 0.2) -> np.ndarray:
    """Boolean per task: some neuron has |kappa| >= hi on it and <= lo on every other task."""
    A = np.abs(kappa)
    if A.shape[1] > 1:
        second = np.sort(A, axis=1)[:, -2]
    else:
        second = np.zeros(A.shape[0])
    best = np.argmax(A, axis=1)
    good = (A.max(axis=1) >= hi) & (second <= lo)
    out = np.zeros(A.shape[1], dtype=bool)
    out[np.unique(best[good])] = True
    return out


def relative_movement(W0: np.ndarray, W1: np.ndarray) -> float:
    """||W1 - W0||_F / ||W0||_F."""
    return float(np.linalg.norm(W1 - W0) / np.linalg.norm(W0))


@dataclass(frozen=True)
class PopulationError:
    value: float
    stderr: float
    metric: str
    n: int

    def __float__(self):
        return self.value


def population_error(predict: Callable, target: AdditiveTarget, n: int = 100_000,
                     metric: str = "L1", seed=None, chunk: int = 50_000) -> PopulationError:
    """Monte Carlo E|f_* - predict| (L1) or sqrt(E(f_* - predict)^2) (L2)."""
    if n < 10_000:
        raise ValueError("n must be >= 1e4")
    if metric not in ("L1", "L2"):
        raise ValueError("metric must be 'L1' or 'L2'")
    rng = np.random.default_rng(seed)
    s1 = s2 = 0.0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        X = rng.standard_normal((k, target.d))
        r = np.asarray(target(X)) - np.asarray(predict(X))
        e = np.abs(r) if metric == "L1" else r * r
        s1 += e.sum()
        s2 += (e * e).sum()
        done += k
    mean = s1 / n
    se = math.sqrt(max(s2 / n - mean * mean, 0.0) / n)
    if metric == "L2":
        root = math.sqrt(mean)
        return PopulationError(root, se / (2 * root) if root > 0 else se, metric, n)
    return PopulationError(mean, se, metric, n)


def emit_scatter(trace: AlignmentTrace, tasks: tuple, path) -> Path:
    """CSV of (kappa_{j,m1}, kappa_{j,m2}) at the first and last snapshots."""
    m1, m2 = tasks
    if m1 == m2:
        raise ValueError("scatter needs two distinct tasks")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["snapshot", "step", "j", f"kappa_{m1}", f"kappa_{m2}"])
            for label, t, K in (("first", trace.times[0], trace.first),
                                ("last", trace.times[-1], trace.final)):
                for j in range(K.shape[0]):
                    w.writerow([label, t, j, _FMT % K[j, m1], _FMT % K[j, m2]])
    except OSError as exc:
        raise OSError(f"could not write scatter file {path}: {exc}") from exc
    return path


def read_scatter(path) -> dict:
    """Inverse of :func:`emit_scatter`: {"first": (J x 2), "last": (J x 2)}."""
    out = {"first": [], "last": []}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            out[row[0]].append((float(row[3]), float(row[4])))
    return {k: np.array(v) for k, v in out.items()}
