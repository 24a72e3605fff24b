import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from additive_lab.diagnostics import relative_movement
from additive_lab.hermite import HermiteSeries
from additive_lab.network import ActivationSpec, NetworkState, features, init_network
from additive_lab.targets import AdditiveTarget, SampleBatch, gen_directions, sample_batch
from additive_lab.trainer import (
    NonFiniteUpdateError,
    TrainSchedule,
    fit_second_layer,
    interphase_randomize,
    phase1_step,
    run_ntk_baseline,
    run_phase1,
    select_lambda,
    step_sizes,
    theoretical_schedule,
    train_algorithm1,
)

HE3 = HermiteSeries.basis(3)


def he3_target(d=16, M=1):
    return AdditiveTarget.uniform(gen_directions(d, M, "canonical"), HE3)


def relu_neuron(w, a=1.0, b=0.0):
    W = np.atleast_2d(np.asarray(w, dtype=float))
    return NetworkState(np.array([a]), W, np.array([b]), ActivationSpec.relu())


class TestSchedule:
    def test_anneal(self):
        s = TrainSchedule(T1=100, T2=1, eta0=2.0)
        etas = step_sizes(s, 0, 100)
        assert_array_equal(etas[:51], 2.0)
        assert math.isclose(etas[99], 2.0 / (99 / 50) ** 2)

    def test_constant(self):
        s = TrainSchedule(T1=10, T2=1, eta0=0.5, step_rule="constant")
        assert_array_equal(step_sizes(s, 3, 7), 0.5)

    def test_piecewise(self):
        s = TrainSchedule(T1=5, T2=1, eta0=1.0, step_rule="piecewise",
                          phase_lengths=(2, 3), phase_etas=(1.0, 0.1))
        assert_allclose(step_sizes(s, 0, 5), [1, 1, 0.1, 0.1, 0.1])

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainSchedule(T1=0, T2=1, eta0=1.0)
        with pytest.raises(ValueError):
            TrainSchedule(T1=5, T2=1, eta0=-1.0)
        with pytest.raises(ValueError):
            TrainSchedule(T1=5, T2=1, eta0=1.0, r=3)
        with pytest.raises(ValueError):
            TrainSchedule(T1=5, T2=1, eta0=1.0, step_rule="piecewise", phase_lengths=(2,), phase_etas=(1.0,))


class TestPhase1Step:
    def test_hand_computed(self):
        net = phase1_step(relu_neuron([1.0, 0.0]), np.array([1.0, 1.0]), 1.0, 0.1)
        assert_allclose(net.W[0], [0.99503719, 0.09950372], atol=1e-8)

    def test_parallel_input(self):
        net = relu_neuron([0.6, 0.8])
        out = phase1_step(net, np.array([1.2, 1.6]), 1.0, 0.5)
        assert_allclose(out.W, net.W, atol=1e-15)

    def test_zero_label(self):
        net = init_network(5, 3, seed=0, bias="uniform")
        out = phase1_step(net, np.ones(3), 0.0, 0.3)
        assert_array_equal(out.W, net.W)

    def test_non_finite(self):
        net = relu_neuron([1.0, 0.0])
        with pytest.raises(NonFiniteUpdateError):
            phase1_step(net, np.array([1.0, 1.0]), np.inf, 0.1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 3.0))
    def test_norm_preserved(self, seed, eta):
        rng = np.random.default_rng(seed)
        net = init_network(6, 4, ActivationSpec.randomized_poly(2, 4), seed=seed, bias="uniform")
        out = phase1_step(net, rng.standard_normal(4), float(rng.standard_normal()), eta)
        assert_allclose(out.row_norms(), 1.0, atol=1e-10)


class TestRunPhase1:
    def test_matches_reference_steps(self):
        # compiled loop against the numpy single-step reference, neuron scale
        t = he3_target(d=5, M=2)
        net = init_network(4, 5, ActivationSpec.randomized_poly(3, 4), seed=1, bias="uniform")
        sch = TrainSchedule(T1=30, T2=1, eta0=0.05, step_rule="constant", gradient_scale="neuron")
        out, _ = run_phase1(net, t, sch, seed=7)
        from additive_lab.targets import SampleStream
        X, Y = SampleStream(t, 7).take(30)
        ref = net
        for x, y in zip(X, Y):
            ref = phase1_step(ref, x, y, 0.05)
        assert_allclose(out.W, ref.W, atol=1e-12)

    def test_zero_step_is_identity(self):
        net = init_network(8, 6, seed=0, bias="uniform")
        sch = TrainSchedule(T1=100, T2=1, eta0=0.0, step_rule="constant")
        out, trace = run_phase1(net, he3_target(6, 2), sch, seed=0)
        assert_array_equal(out.W, net.W)
        assert_array_equal(trace.first, trace.final)

    def test_deterministic(self):
        net = init_network(16, 8, seed=0, bias="uniform")
        sch = TrainSchedule(T1=500, T2=1, eta0=0.5, snapshot_every=100)
        a = run_phase1(net, he3_target(8, 2), sch, seed=4)[1]
        b = run_phase1(net, he3_target(8, 2), sch, seed=4)[1]
        assert a.times == b.times == [0, 100, 200, 300, 400, 500]
        for x, y in zip(a.snapshots, b.snapshots):
            assert_array_equal(x, y)

    def test_neuron_independence(self):
        t = he3_target(d=6, M=2)
        net = init_network(5, 6, seed=2, bias="uniform")
        sch = TrainSchedule(T1=2000, T2=1, eta0=0.05, gradient_scale="neuron")
        full, _ = run_phase1(net, t, sch, seed=3)
        for j in range(net.J):
            alone, _ = run_phase1(net.subset([j]), t, sch, seed=3)
            assert_array_equal(alone.W[0], full.W[j])

    def test_norms_over_run(self):
        net = init_network(32, 8, ActivationSpec.randomized_poly(3, 5), seed=0)
        sch = TrainSchedule(T1=3000, T2=1, eta0=0.3, gradient_scale="neuron", snapshot_every=1000)
        out, _ = run_phase1(net, he3_target(8, 2), sch, seed=1)
        assert_allclose(out.row_norms(), 1.0, atol=1e-10)

    def test_rejects_off_sphere(self):
        net = init_network(2, 3, seed=0)
        with pytest.raises(ValueError):
            run_phase1(net.copy(W=2 * net.W), he3_target(3, 1), TrainSchedule(T1=1, T2=1, eta0=1.0))

    def test_diverging_step_reported(self):
        net = init_network(2, 3, seed=0, bias="uniform")
        sch = TrainSchedule(T1=10, T2=1, eta0=1e308, step_rule="constant", gradient_scale="neuron")
        t = AdditiveTarget.uniform(gen_directions(3, 1, "canonical"), HE3, noise_std=0.0)
        with pytest.raises(NonFiniteUpdateError) as info:
            run_phase1(net, t, sch, seed=0)
        assert info.value.step >= 0

    @pytest.mark.slow
    def test_single_task_recovery(self):
        t = he3_target(d=16, M=1)
        net = init_network(512, 16, seed=0, bias="uniform")
        sch = TrainSchedule(T1=50_000, T2=1, eta0=0.005, step_rule="constant",
                            gradient_scale="neuron", snapshot_every=50_000)
        _, trace = run_phase1(net, t, sch, seed=1)
        assert trace.final[:, 0].max() >= 0.9


class TestInterphase:
    def test_zero_range(self):
        net = init_network(4000, 3, seed=0, bias="uniform")
        out = interphase_randomize(net, 0.0, seed=1)
        assert_array_equal(out.b, 0.0)
        flipped = np.all(out.W == -net.W, axis=1)
        kept = np.all(out.W == net.W, axis=1)
        assert np.all(flipped | kept)
        assert abs(flipped.mean() - 0.5) <= 3 * 0.5 / math.sqrt(4000)
        assert_array_equal(out.row_norms(), net.row_norms())

    def test_bias_range(self):
        out = interphase_randomize(init_network(500, 2, seed=0), 2.0, seed=0)
        assert np.all(np.abs(out.b) <= 2.0) and out.C_b == 2.0


def two_neuron_batch():
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    net = NetworkState(np.ones(2), W, np.zeros(2), ActivationSpec.relu())
    xs = np.array([[1.0, 0.5], [0.2, 2.0]])
    return net, SampleBatch(xs, np.array([0.7, -1.3]))


class TestSecondLayer:
    def test_interpolation(self):
        net, batch = two_neuron_batch()
        fit = fit_second_layer(net, batch, 2, 0.0)
        # features/J = [[0.5, 0.25], [0.1, 1.0]]; solve directly
        Phi = np.array([[0.5, 0.25], [0.1, 1.0]])
        assert_allclose(fit.net.a, np.linalg.solve(Phi, batch.ys), rtol=1e-12)
        assert fit.train_objective <= 1e-24
        assert_allclose(fit(batch.xs), batch.ys, atol=1e-12)

    def test_huge_lambda(self):
        net, batch = two_neuron_batch()
        for r in (1, 2):
            fit = fit_second_layer(net, batch, r, 1e12)
            assert np.abs(fit.net.a).max() <= 1e-10
            assert math.isclose(fit.train_objective, np.mean(batch.ys**2), rel_tol=1e-9)

    def test_lasso_threshold(self):
        t = he3_target(6, 2)
        net = init_network(30, 6, seed=0, bias="uniform")
        batch = sample_batch(t, 500, seed=1)
        Phi = features(net, batch.xs) / net.J
        lam = 2 * np.max(np.abs(Phi.T @ batch.ys)) / len(batch)
        fit = fit_second_layer(net, batch, 1, lam * 1.0001)
        assert np.all(fit.net.a == 0.0)
        below = fit_second_layer(net, batch, 1, lam * 0.5)
        assert np.any(below.net.a != 0.0)

    @pytest.mark.parametrize("r", [1, 2])
    def test_objective_non_increasing(self, r):
        net = init_network(40, 6, seed=0, bias="uniform")
        batch = sample_batch(he3_target(6, 2), 400, seed=2)
        fit = fit_second_layer(net, batch, r, 1e-4)
        h = np.array(fit.history)
        assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))

    def test_ridge_stationary(self):
        net = init_network(60, 6, seed=0, bias="uniform")
        batch = sample_batch(he3_target(6, 2), 300, seed=3)
        lam = 1e-3
        fit = fit_second_layer(net, batch, 2, lam)
        Phi = features(net, batch.xs) / net.J
        a = fit.net.a
        grad = 2 * Phi.T @ (Phi @ a - batch.ys) / len(batch) + 2 * lam * a
        assert np.linalg.norm(grad) <= 1e-6 * (1 + np.linalg.norm(a))

    def test_ridge_cg_branch(self):
        # width above the direct-solve limit goes through conjugate gradients
        net = init_network(4100, 3, seed=0, bias="uniform")
        batch = sample_batch(he3_target(3, 1), 200, seed=0)
        lam = 1e-6
        fit = fit_second_layer(net, batch, 2, lam)
        Phi = features(net, batch.xs) / net.J
        grad = 2 * Phi.T @ (Phi @ fit.net.a - batch.ys) / len(batch) + 2 * lam * fit.net.a
        assert np.linalg.norm(grad) <= 1e-6 * (1 + np.linalg.norm(fit.net.a))

    def test_lasso_kkt(self):
        net = init_network(25, 5, seed=1, bias="uniform")
        batch = sample_batch(he3_target(5, 1), 400, seed=4)
        fit = fit_second_layer(net, batch, 1, 1e-4)
        assert fit.residual <= 1e-4

    def test_select_lambda(self):
        net = init_network(50, 6, seed=0, bias="uniform")
        batch = sample_batch(he3_target(6, 2), 1000, seed=5)
        fit, table = select_lambda(net, batch)
        assert len(table) == 5
        assert fit.lambda_bar == min(table, key=table.get)


class TestAlgorithm1:
    def test_end_to_end_small(self):
        t = he3_target(8, 2)
        sch = TrainSchedule(T1=20_000, T2=2000, eta0=0.3 * math.sqrt(6), snapshot_every=10_000)
        res = train_algorithm1(t, 256, sch, seed=0)
        assert res.trace.times == [0, 10_000, 20_000]
        assert_array_equal(res.net0.W, train_algorithm1(t, 256, sch, seed=0).net0.W)
        assert np.all(np.isfinite(res.fitted.net.a))


class TestNTK:
    def test_zero_step(self):
        net0, net, trace = run_ntk_baseline(64, 8, he3_target(8, 2), 200, 0.0, seed=0)
        assert_array_equal(net.W, net0.W)
        assert_array_equal(net.a, net0.a)

    def test_lazy_small_movement(self):
        J, d = 2048, 16
        t = he3_target(d, 2)
        net0, net, trace = run_ntk_baseline(J, d, t, 20_000, 3e-4, seed=0, snapshot_every=20_000)
        assert np.abs(trace.final - trace.first).max() <= 0.05
        assert relative_movement(net0.W, net.W) <= 0.05
        assert set(np.abs(net0.a)) == {math.sqrt(J)}

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            run_ntk_baseline(4, 5, he3_target(6, 1), 10, 0.1)


class TestTheoreticalSchedule:
    UNIT = {"c11": 1, "c12": 1, "c13": 1, "c_eta": 1, "c_eta3": 1}

    def test_first_stage_length(self):
        s = theoretical_schedule(64, 16, 3, 0.1, self.UNIT)
        assert s.phase_lengths[0] == 65536

    def test_dimension_law(self):
        a = theoretical_schedule(64, 4, 3, 0.1, self.UNIT)
        b = theoretical_schedule(128, 4, 3, 0.1, self.UNIT)
        assert b.phase_lengths[0] == 4 * a.phase_lengths[0]
        c = theoretical_schedule(256, 4, 3, 0.1, self.UNIT)
        assert math.isclose(a.phase_etas[0] / c.phase_etas[0], 8.0, rel_tol=1e-12)

    def test_missing_constants(self):
        with pytest.raises(ValueError, match="c13"):
            theoretical_schedule(8, 2, 3, 0.1, {"c11": 1, "c12": 1, "c_eta": 1, "c_eta3": 1})
