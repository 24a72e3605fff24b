"""Two-phase training: spherical online SGD on the first layer, then a convex
fit of the second layer on frozen features.  Also the lazy (NTK) baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from . import _kernels
from .diagnostics import AlignmentTrace, alignment_matrix
from .network import (
    ActivationSpec,
    NetworkState,
    activation_derivs,
    features,
    init_network,
)
from .targets import AdditiveTarget, SampleBatch, SampleStream, sample_batch, seed_sequence

__all__ = [
    "NonFiniteUpdateError",
    "ConvergenceError",
    "TrainSchedule",
    "FittedModel",
    "phase1_step",
    "run_phase1",
    "interphase_randomize",
    "fit_second_layer",
    "select_lambda",
    "random_features_baseline",
    "train_algorithm1",
    "run_ntk_baseline",
    "theoretical_schedule",
    "step_sizes",
]

_CHUNK = 50_000
_STEP_RULES = ("constant", "anneal", "piecewise")


class NonFiniteUpdateError(FloatingPointError):
    """An SGD update produced NaN or Inf; ``step`` is the offending step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite update at step {step} (step size too large?)")
        self.step = step


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class TrainSchedule:
    """Step counts, step-size rule and second-layer regularization.

    step_rule
        ``constant``: eta0 throughout.  ``anneal``: eta0 until step
        ``anneal_start`` (default T1 // 2), then eta0 / (t / anneal_start)^2.
        ``piecewise``: ``phase_etas[i]`` for ``phase_lengths[i]`` steps.
    gradient_scale
        ``network`` divides the step by J, i.e. the gradient of the 1/J-scaled
        network output; ``neuron`` uses the per-neuron gradient as is.
    """

    T1: int
    T2: int
    eta0: float
    step_rule: str = "anneal"
    anneal_start: int | None = None
    lambda_bar: float = 0.0
    r: int = 2
    snapshot_every: int = 10_000
    gradient_scale: str = "network"
    phase_lengths: tuple = ()
    phase_etas: tuple = ()

    def __post_init__(self):
        if self.T1 < 1 or self.T2 < 1:
            raise ValueError("T1 and T2 must be >= 1")
        if not self.eta0 >= 0:
            raise ValueError("eta0 must be >= 0")
        if self.step_rule not in _STEP_RULES:
            raise ValueError(f"step_rule must be one of {_STEP_RULES}")
        if self.r not in (1, 2):
            raise ValueError("r must be 1 or 2")
        if self.lambda_bar < 0:
            raise ValueError("lambda_bar must be >= 0")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.gradient_scale not in ("network", "neuron"):
            raise ValueError("gradient_scale must be 'network' or 'neuron'")
        if self.step_rule == "piecewise":
            if len(self.phase_lengths) != len(self.phase_etas) or not self.phase_lengths:
                raise ValueError("piecewise rule needs matching phase_lengths and phase_etas")
            if sum(self.phase_lengths) != self.T1:
                raise ValueError("phase_lengths must sum to T1")

    @property
    def t_anneal(self) -> int:
        return self.anneal_start if self.anneal_start is not None else max(self.T1 // 2, 1)


def step_sizes(schedule: TrainSchedule, start: int, stop: int) -> np.ndarray:
    """eta^t for t in [start, stop), before any 1/J scaling."""
    t = np.arange(start, stop, dtype=np.float64)
    if schedule.step_rule == "constant":
        return np.full(t.shape, schedule.eta0)
    if schedule.step_rule == "anneal":
        Tp = schedule.t_anneal
        return schedule.eta0 / np.maximum(t / Tp, 1.0) ** 2
    edges = np.cumsum(schedule.phase_lengths)
    idx = np.searchsorted(edges, t, side="right")
    return np.asarray(schedule.phase_etas, dtype=np.float64)[np.minimum(idx, len(edges) - 1)]


@dataclass(frozen=True, eq=False)
class FittedModel:
    net: NetworkState
    train_objective: float
    lambda_bar: float
    r: int
    history: tuple = ()
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.net.a)):
            raise ValueError("fitted second layer is not finite")
        if self.train_objective < 0:
            raise ValueError("objective must be non-negative")

    def __call__(self, x):
        return self.net(x)


# -- Phase I -------------------------------------------------------------

def phase1_step(net: NetworkState, x, y: float, eta: float) -> NetworkState:
    """One spherical SGD step on the correlation loss -y f(x), all neurons.

    w_j <- normalize(w_j + eta y a_j sigma_j'(w_j.x + b_j) (I - w_j w_j^T) x).
    Rows whose update coefficient is zero are left untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    W = net.W
    s = W @ x
    c = eta * y * net.a * activation_derivs(net.act, (s + net.b)[None, :])[0]
    Wn = W.copy()
    live = c != 0.0
    if np.any(live):
        with np.errstate(over="ignore", invalid="ignore"):
            step = Wn[live] + c[live, None] * (x[None, :] - s[live, None] * Wn[live])
            norms = np.linalg.norm(step, axis=1, keepdims=True)
            step = step / norms
        if not np.all(np.isfinite(step)):
            raise NonFiniteUpdateError(0)
        Wn[live] = step
    return net.copy(W=Wn)


def _dcoef(act: ActivationSpec, J: int) -> tuple:
    if act.kind == "relu":
        return 0, np.zeros((J, 1)), np.zeros((J, 1))
    C = act.coeff_table()
    D = np.ascontiguousarray(C[:, 1:] * np.arange(1, act.q + 1))
    return 1, np.ascontiguousarray(C), D


def _chunks(T: int, every: int):
    """Chunk boundaries that land on every snapshot step."""
    start = 0
    while start < T:
        nxt = min(T, (start // every + 1) * every, start + _CHUNK)
        yield start, nxt
        start = nxt


def run_phase1(net: NetworkState, target: AdditiveTarget, schedule: TrainSchedule,
               seed=None, trace_sink: Callable | None = None,
               normalize_alignment: bool = False) -> tuple:
    """Online spherical SGD for ``schedule.T1`` fresh samples.

    Returns ``(net, trace)``.  Alignment snapshots are taken at step 0, every
    ``snapshot_every`` steps and at the end; each is also passed to
    ``trace_sink(step, kappa)`` if given.
    """
    norms = net.row_norms()
    if np.max(np.abs(norms - 1.0)) > 1e-10:
        raise ValueError("rows of W must have unit norm")
    W = np.ascontiguousarray(net.W.copy())
    a = np.ascontiguousarray(net.a, dtype=np.float64)
    b = np.ascontiguousarray(net.b, dtype=np.float64)
    kind, _, D = _dcoef(net.act, net.J)
    scale = 1.0 / net.J if schedule.gradient_scale == "network" else 1.0
    stream = SampleStream(target, seed)
    trace = AlignmentTrace()

    def snap(step, Wc):
        k = alignment_matrix(net.copy(W=Wc), target.dirs, normalize=normalize_alignment)
        trace.record(step, k)
        if trace_sink is not None:
            trace_sink(step, k)

    snap(0, W)
    for start, stop in _chunks(schedule.T1, schedule.snapshot_every):
        X, Y = stream.take(stop - start)
        etas = step_sizes(schedule, start, stop) * scale
        bad = _kernels.spherical_sgd(W, a, b, X, Y, etas, kind, D, start)
        if bad >= 0:
            raise NonFiniteUpdateError(int(bad))
        if stop % schedule.snapshot_every == 0 or stop == schedule.T1:
            snap(stop, W)
    return net.copy(W=W), trace


def interphase_randomize(net: NetworkState, C_b: float, seed=None) -> NetworkState:
    """Resample biases on [-C_b, C_b] and flip each row of W by a random sign."""
    if C_b < 0:
        raise ValueError("C_b must be >= 0")
    rng = np.random.default_rng(seed)
    b = rng.uniform(-C_b, C_b, size=net.J)
    delta = rng.choice((-1.0, 1.0), size=net.J)
    return net.copy(W=net.W * delta[:, None], b=b, C_b=float(C_b))


# -- Phase II ------------------------------------------------------------

def _objective(Phi, y, a, lam, r):
    res = Phi @ a - y
    reg = lam * (np.sum(a * a) if r == 2 else np.sum(np.abs(a)))
    return float(res @ res / len(y) + reg)


def fit_second_layer(net: NetworkState, batch: SampleBatch, r: int = 2,
                     lambda_bar: float = 0.0, tol: float = 1e-8,
                     max_iter: int = 100_000) -> FittedModel:
    """Minimize (1/n) sum (f(x) - y)^2 + lambda_bar ||a||_r^r over a.

    Features are sigma_j(w_j.x + b_j) / J, so the returned network predicts
    with the usual forward pass.  r=2 uses a Cholesky solve of the normal
    equations for J <= 4096 (least squares when lambda_bar = 0) and conjugate
    gradients above.  r=1 uses monotone FISTA; ``residual`` is the KKT residual.
    """
    if r not in (1, 2):
        raise ValueError("r must be 1 or 2")
    if lambda_bar < 0:
        raise ValueError("lambda_bar must be >= 0")
    n, J = len(batch), net.J
    Phi = features(net, batch.xs) / J
    y = batch.ys
    G = Phi.T @ Phi / n
    c = Phi.T @ y / n
    obj0 = float(y @ y / n)
    if r == 2:
        a, resid, it = _ridge(Phi, y, G, c, lambda_bar, tol)
        obj = _objective(Phi, y, a, lambda_bar, 2)
        hist = (obj0, min(obj, obj0))
    else:
        a, hist, resid, it = _lasso(G, c, obj0, lambda_bar, tol, max_iter)
        obj = _objective(Phi, y, a, lambda_bar, 1)
    return FittedModel(net.copy(a=a), obj, float(lambda_bar), r, tuple(hist), float(resid), it)


def _ridge(Phi, y, G, c, lam, tol):
    J = G.shape[0]
    if J <= 4096:
        if lam == 0.0:
            a = scipy.linalg.lstsq(Phi, y, lapack_driver="gelsd")[0]
        else:
            try:
                a = scipy.linalg.cho_solve(scipy.linalg.cho_factor(G + lam * np.eye(J)), c)
            except np.linalg.LinAlgError:
                a = scipy.linalg.solve(G + lam * np.eye(J), c, assume_a="sym")
        it = 1
    else:
        op = scipy.sparse.linalg.LinearOperator((J, J), matvec=lambda v: G @ v + lam * v,
                                                dtype=np.float64)
        a, info = scipy.sparse.linalg.cg(op, c, rtol=0.0, atol=tol / 2, maxiter=10 * J)
        it = info if info > 0 else 0
    resid = float(np.linalg.norm(2 * (G @ a - c) + 2 * lam * a))
    if J > 4096 and resid > tol:
        raise ConvergenceError("conjugate gradient did not converge", resid)
    return a, resid, it


def _lasso_kkt(G, c, a, lam):
    g = 2 * (G @ a - c)
    nz = a != 0
    out = np.where(nz, np.abs(g + lam * np.sign(a)), np.maximum(np.abs(g) - lam, 0.0))
    return float(np.max(out)) if out.size else 0.0


def _lasso(G, c, obj0, lam, tol, max_iter):
    """Monotone FISTA on (a^T G a - 2 c^T a + const) + lam |a|_1."""
    J = G.shape[0]
    L = 2.0 * float(scipy.linalg.eigvalsh(G, subset_by_index=[J - 1, J - 1])[0])
    if L <= 0:
        return np.zeros(J), [obj0], 0.0, 0
    const = obj0

    def F(v):
        return float(v @ G @ v - 2 * c @ v + const + lam * np.abs(v).sum())

    x = np.zeros(J)
    z = x.copy()
    tk = 1.0
    fx = F(x)
    hist = [fx]
    for it in range(1, max_iter + 1):
        g = 2 * (G @ z - c)
        u = z - g / L
        v = np.sign(u) * np.maximum(np.abs(u) - lam / L, 0.0)
        fv = F(v)
        tn = (1 + math.sqrt(1 + 4 * tk * tk)) / 2
        x_old = x
        if fv <= fx:
            x, fnew = v, fv
        else:
            fnew = fx
        z = x + (tk / tn) * (v - x) + ((tk - 1) / tn) * (x - x_old)
        tk = tn
        change = abs(fx - fnew) / max(abs(fx), 1e-300)
        fx = fnew
        hist.append(fx)
        if it > 10 and change < tol and _lasso_kkt(G, c, x, lam) < math.sqrt(tol):
            return x, hist, _lasso_kkt(G, c, x, lam), it
        if np.all(x == 0) and np.all(v == 0) and np.max(np.abs(2 * c)) <= lam:
            return x, hist, _lasso_kkt(G, c, x, lam), it
    raise ConvergenceError("iterative soft-thresholding did not converge",
                           _lasso_kkt(G, c, x, lam))


LAMBDA_GRID = tuple(10.0 ** k for k in range(-4, 1))


def select_lambda(net: NetworkState, batch: SampleBatch, r: int = 2,
                  grid=LAMBDA_GRID, holdout: float = 0.2, relative: bool = True):
    """Pick lambda_bar by held-out squared error, then refit on the whole batch.

    With ``relative`` the grid is multiplied by the mean diagonal of the
    feature Gram matrix, which makes it independent of the 1/J feature scale.
    Returns ``(fitted, table)`` with ``table`` mapping lambda_bar to held-out MSE.
    """
    n_fit = int(round(len(batch) * (1 - holdout)))
    if not 0 < n_fit < len(batch):
        raise ValueError("holdout leaves an empty split")
    train, test = batch.split(n_fit)
    scale = 1.0
    if relative:
        Phi = features(net, train.xs) / net.J
        scale = float(np.mean(np.sum(Phi * Phi, axis=0)) / len(train))
    table = {}
    for g in grid:
        lam = float(g) * scale
        fit = fit_second_layer(net, train, r, lam)
        res = fit.net(test.xs) - test.ys
        table[lam] = float(res @ res / len(test))
    best = min(table, key=table.get)
    return fit_second_layer(net, batch, r, best), table


def random_features_baseline(target: AdditiveTarget, J: int, T2: int, C_b: float = 1.0,
                             r: int = 2, act: ActivationSpec | None = None, seed=None,
                             grid=LAMBDA_GRID):
    """Second-layer fit on untrained random first-layer features."""
    s_init, s_data = seed_sequence(seed).spawn(2)
    net = init_network(J, target.d, act, C_b, seed=s_init, bias="uniform")
    batch = sample_batch(target, T2, s_data)
    return select_lambda(net, batch, r, grid)


@dataclass
class Algorithm1Result:
    net0: NetworkState
    net1: NetworkState
    trace: AlignmentTrace
    fitted: FittedModel
    lambda_table: dict = field(default_factory=dict)


def train_algorithm1(target: AdditiveTarget, J: int, schedule: TrainSchedule,
                     act: ActivationSpec | None = None, C_b: float = 1.0,
                     C_b_init: float | None = None, init_bias: str = "uniform",
                     seed=None, tune_lambda: bool = True, grid=LAMBDA_GRID,
                     trace_sink: Callable | None = None) -> Algorithm1Result:
    """Phase I, interphase randomization and Phase II end to end.

    Phase II data is drawn from an independent child seed so its labels are
    disjoint from the Phase I stream.
    """
    s_init, s_p1, s_mid, s_p2 = seed_sequence(seed).spawn(4)
    cb0 = C_b if C_b_init is None else C_b_init
    net0 = init_network(J, target.d, act, cb0, seed=s_init, bias=init_bias)
    net1, trace = run_phase1(net0, target, schedule, s_p1, trace_sink)
    net2 = interphase_randomize(net1, C_b, s_mid)
    batch = sample_batch(target, schedule.T2, s_p2)
    if tune_lambda:
        fitted, table = select_lambda(net2, batch, schedule.r, grid)
    else:
        fitted, table = fit_second_layer(net2, batch, schedule.r, schedule.lambda_bar), {}
    return Algorithm1Result(net0, net1, trace, fitted, table)


# -- lazy baseline -------------------------------------------------------

def run_ntk_baseline(J: int, d: int, target: AdditiveTarget, steps: int, eta: float,
                     seed=None, act: ActivationSpec | None = None, C_b: float = 1.0,
                     init_bias: str = "uniform", snapshot_every: int = 10_000,
                     trace_sink: Callable | None = None) -> tuple:
    """Plain SGD on both layers, squared loss, 1/sqrt(J) output scale.

    The second layer is stored as a_j = +-sqrt(J) so the usual forward pass
    (1/J) sum a_j sigma_j gives the 1/sqrt(J) scaling.  Biases stay frozen.
    Alignments are measured on normalized rows since rows leave the sphere.
    Returns ``(net0, net, trace)``.
    """
    if target.d != d:
        raise ValueError("target dimension does not match d")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    s_init, s_data = seed_sequence(seed).spawn(2)
    net0 = init_network(J, d, act, C_b, seed=s_init, bias=init_bias)
    net0 = net0.copy(a=net0.a * math.sqrt(J))
    W = np.ascontiguousarray(net0.W.copy())
    a = net0.a.copy()
    kind, C, D = _dcoef(net0.act, J)
    stream = SampleStream(target, s_data)
    trace = AlignmentTrace()

    def snap(step):
        k = alignment_matrix(net0.copy(W=W), target.dirs, normalize=True)
        trace.record(step, k)
        if trace_sink is not None:
            trace_sink(step, k)

    snap(0)
    for start, stop in _chunks(steps, snapshot_every):
        X, Y = stream.take(stop - start)
        if eta > 0:
            bad = _kernels.lazy_sgd(W, a, net0.b, X, Y, float(eta), kind, C, D, start)
            if bad >= 0:
                raise NonFiniteUpdateError(int(bad))
        if stop % snapshot_every == 0 or stop == steps:
            snap(stop)
    return net0, net0.copy(W=W, a=a), trace


# -- theory-driven schedule ----------------------------------------------

def theoretical_schedule(d: int, M: int, p: int, eps: float, constants: dict,
                         T2: int = 10_000) -> TrainSchedule:
    """Piecewise schedule following the rate laws for the three Phase I stages.

    With eps_t = eps / sqrt(M):
    T11 = c11 M d^(p-1), T12 = c12 M d^(p/2), T13 = c13 max(eps_t^-2 M d, eps_t^-3 M),
    eta = c_eta M^(-1/2) d^(-p/2) for the first two stages and
    c_eta3 min(eps_t M^(-1/2) / d, eps_t^2 M^(-1/2)) for the last.
    ``constants`` must give every c; the rates hide them.
    """
    need = ("c11", "c12", "c13", "c_eta", "c_eta3")
    missing = [k for k in need if k not in constants]
    if missing:
        raise ValueError(f"missing schedule constants {missing}")
    if p < 2 or not 0 < eps:
        raise ValueError("need p >= 2 and eps > 0")
    c = constants
    et = eps / math.sqrt(M)
    T11 = max(1, int(round(c["c11"] * M * d ** (p - 1))))
    T12 = max(1, int(round(c["c12"] * M * d ** (p / 2))))
    T13 = max(1, int(round(c["c13"] * max(et ** -2 * M * d, et ** -3 * M))))
    eta = c["c_eta"] * M ** -0.5 * d ** (-p / 2)
    eta3 = c["c_eta3"] * min(et * M ** -0.5 / d, et ** 2 * M ** -0.5)
    return TrainSchedule(
        T1=T11 + T12 + T13, T2=T2, eta0=eta, step_rule="piecewise",
        gradient_scale="neuron", phase_lengths=(T11, T12, T13),
        phase_etas=(eta, eta, eta3),
    )
