import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import norm

from additive_lab.hermite import HermiteSeries, he_eval, relu_shifted_inner, series_eval, split_quadrature
from additive_lab.network import (
    ActivationSpec,
    NetworkState,
    activation_derivs,
    descent_path_check,
    descent_path_margins,
    features,
    forward,
    init_network,
    load_network,
    neuron_expansion,
    save_network,
)
from additive_lab.targets import AdditiveTarget, gen_directions


def single_neuron(w, b=0.0, a=1.0, act=None):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return NetworkState(np.array([a]), w, np.array([b]), act or ActivationSpec.relu())


def poly_only(p, q, degree, sign=1, normalization="sqrt_i"):
    signs = np.zeros((1, q - p + 1), dtype=np.int8)
    signs[0, degree - p] = sign
    return ActivationSpec.randomized_poly(p, q, signs, normalization)


class TestInit:
    def test_wide_rows_unit(self):
        net = init_network(8192, 64, seed=0)
        assert_allclose(net.row_norms(), 1.0, atol=1e-12)
        assert set(np.unique(net.a)) == {-1.0, 1.0}
        assert_array_equal(net.b, 0.0)

    def test_isotropy(self):
        net = init_network(8192, 64, seed=1)
        sq = net.W[:, 0] ** 2
        # E = 1/d, Var = 2(d-1)/(d^2 (d+2))
        d = 64
        sd = math.sqrt(2 * (d - 1) / (d * d * (d + 2)) / 8192)
        assert abs(sq.mean() - 1 / d) <= 3 * sd

    def test_deterministic(self):
        a = init_network(16, 5, ActivationSpec.randomized_poly(2, 4), seed=3)
        b = init_network(16, 5, ActivationSpec.randomized_poly(2, 4), seed=3)
        assert_array_equal(a.W, b.W)
        assert_array_equal(a.a, b.a)
        assert_array_equal(a.act.signs, b.act.signs)

    def test_uniform_bias_range(self):
        net = init_network(1000, 3, C_b=2.0, seed=0, bias="uniform")
        assert np.all(np.abs(net.b) <= 2.0)
        assert net.b.std() > 0.5

    def test_bad_args(self):
        with pytest.raises(ValueError):
            init_network(0, 3)
        with pytest.raises(ValueError):
            init_network(2, 3, C_b=-1)

    def test_sign_pattern_frequency(self):
        J, p, q = 30_000, 3, 5
        net = init_network(J, 2, ActivationSpec.randomized_poly(p, q), seed=5)
        hit = np.all(net.act.signs == 1, axis=1).mean()
        prob = 3.0 ** -(q - p + 1)
        assert abs(hit - prob) <= 3 * math.sqrt(prob * (1 - prob) / J)


class TestActivationSpec:
    def test_bad_signs(self):
        with pytest.raises(ValueError):
            ActivationSpec.randomized_poly(2, 3, np.array([[2, 0]]))
        with pytest.raises(ValueError):
            ActivationSpec.randomized_poly(2, 3, np.array([[1, 0, 1]]))

    def test_bad_degrees(self):
        with pytest.raises(ValueError):
            ActivationSpec.randomized_poly(3, 2)

    def test_normalizations(self):
        assert_allclose(ActivationSpec.randomized_poly(2, 4).degree_scale(), 1 / np.sqrt([2, 3, 4]))
        assert_allclose(ActivationSpec.randomized_poly(2, 4, normalization="sqrt_factorial").degree_scale(),
                        1 / np.sqrt([2, 6, 24]))


class TestForward:
    def test_relu_negative_branch(self):
        net = single_neuron([1.0, 0.0], b=-3.0)
        assert forward(net, np.array([1.0, 0.0])) == 0.0

    def test_cancellation(self):
        W = np.array([[0.6, 0.8], [0.6, 0.8]])
        net = NetworkState(np.array([1.0, -1.0]), W, np.zeros(2), ActivationSpec.relu())
        assert forward(net, np.array([0.3, 1.1])) == 0.0

    def test_poly_single_degree(self):
        net = single_neuron([1.0], b=0.0, act=poly_only(1, 4, 3))
        assert math.isclose(forward(net, np.array([2.0])), 2 / math.sqrt(3), rel_tol=1e-14)

    def test_linear_in_a(self):
        net = init_network(40, 6, seed=2, bias="uniform")
        X = np.random.default_rng(0).standard_normal((10, 6))
        double = net.copy(a=2 * net.a)
        assert_allclose(forward(double, X), 2 * forward(net, X), rtol=1e-15)

    def test_matrix_matches_rows(self):
        net = init_network(7, 4, ActivationSpec.randomized_poly(2, 4), seed=1)
        X = np.random.default_rng(1).standard_normal((5, 4))
        assert_allclose(forward(net, X), [forward(net, x) for x in X], rtol=1e-14)

    def test_scaling_by_width(self):
        net = init_network(3, 2, seed=0)
        X = np.eye(2)
        want = features(net, X) @ net.a / 3
        assert_allclose(net(X), want, rtol=1e-15)

    def test_relu_derivative_at_zero(self):
        assert_array_equal(activation_derivs(ActivationSpec.relu(), np.array([-1.0, 0.0, 1.0])), [0, 0, 1])

    def test_poly_derivative(self):
        act = poly_only(2, 4, 4)
        z = np.linspace(-2, 2, 7)[:, None]
        assert_allclose(activation_derivs(act, z)[:, 0], 4 * he_eval(3, z[:, 0]) / 2.0, rtol=1e-12)


class TestNeuronExpansion:
    def test_relu_degree2(self):
        s = neuron_expansion(single_neuron([1.0]), 0, 4)
        assert math.isclose(s.coeffs[2] * 2, 1 / math.sqrt(2 * math.pi), rel_tol=1e-14)

    def test_relu_matches_inner_products(self):
        s = neuron_expansion(single_neuron([1.0], b=0.7), 0, 6)
        want = [relu_shifted_inner(0.7, i) / math.factorial(i) for i in range(7)]
        assert_allclose(s.coeffs, want, rtol=1e-13)

    def test_poly_unshifted(self):
        act = ActivationSpec.randomized_poly(2, 4, np.array([[1, 0, -1]], dtype=np.int8))
        s = neuron_expansion(single_neuron([1.0], act=act), 0, 4)
        assert_allclose(s.coeffs, [0, 0, 1 / math.sqrt(2), 0, -0.5], atol=1e-15)

    def test_sign_of_a(self):
        pos = neuron_expansion(single_neuron([1.0], b=0.4, a=1.0), 0, 5)
        neg = neuron_expansion(single_neuron([1.0], b=0.4, a=-1.0), 0, 5)
        assert_allclose(neg.coeffs, -pos.coeffs)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-1.5, 1.5), st.integers(0, 1000))
    def test_poly_reconstruction(self, b, seed):
        act = ActivationSpec.randomized_poly(2, 6).with_signs(1, np.random.default_rng(seed))
        net = single_neuron([1.0], b=b, act=act)
        s = neuron_expansion(net, 0, 6)
        z = np.linspace(-4, 4, 33)
        direct = features(net, z[:, None])[:, 0]
        assert_allclose(series_eval(s, z), direct, atol=1e-8)

    def test_relu_truncation_matches_tail(self):
        # the kink makes coefficients decay slowly; the squared truncation error
        # must equal E relu(z+b)^2 minus the captured Parseval mass
        b = 0.3
        s = neuron_expansion(single_neuron([1.0], b=b), 0, 12)
        rule = split_quadrature([-b])
        err = rule.expect(lambda z: (series_eval(s, z) - np.maximum(z + b, 0.0)) ** 2)
        total = (b * b + 1) * norm.cdf(b) + b * norm.pdf(b)
        assert math.isclose(err, total - s.second_moment(), rel_tol=1e-8)
        assert 0.01 <= math.sqrt(err) <= 0.05

    def test_index_range(self):
        with pytest.raises(IndexError):
            neuron_expansion(single_neuron([1.0]), 1, 3)


class TestDescentPath:
    def target_he3(self):
        return AdditiveTarget.uniform(gen_directions(2, 1, "canonical"), HermiteSeries.basis(3))

    def test_relu_negative_bias(self):
        # degree-3 ReLU coefficient is -phi(b) b / 6, positive for b < 0
        t = self.target_he3()
        assert descent_path_check(single_neuron([1.0, 0.0], b=-1.0), t)[0, 0]
        assert not descent_path_check(single_neuron([1.0, 0.0], b=1.0), t)[0, 0]

    def test_zero_bias_fails(self):
        t = self.target_he3()
        ok, margin = descent_path_check(single_neuron([1.0, 0.0], b=0.0), t, return_margin=True)
        assert not ok[0, 0]
        assert abs(margin[0, 0]) <= 1e-16

    def test_well_specified(self):
        t = self.target_he3()
        act = poly_only(3, 3, 3)
        assert descent_path_check(single_neuron([1.0, 0.0], act=act), t)[0, 0]
        assert not descent_path_check(single_neuron([1.0, 0.0], a=-1.0, act=act), t)[0, 0]

    def test_higher_degree_conflict(self):
        link = HermiteSeries([0, 0, 0, 1.0, 1.0])
        t = AdditiveTarget.uniform(gen_directions(2, 1, "canonical"), link)
        signs = np.array([[1, -1]], dtype=np.int8)
        net = single_neuron([1.0, 0.0], act=ActivationSpec.randomized_poly(3, 4, signs))
        margins = descent_path_margins(net, t)
        assert margins[0, 0] < 0
        assert not descent_path_check(net, t)[0, 0]

    def test_shape(self):
        t = AdditiveTarget.uniform(gen_directions(5, 3, "canonical"), HermiteSeries.basis(3))
        assert descent_path_check(init_network(4, 5, seed=0, bias="uniform"), t).shape == (4, 3)


class TestCheckpoint:
    @pytest.mark.parametrize("act", [ActivationSpec.relu(), ActivationSpec.randomized_poly(2, 5)])
    def test_roundtrip(self, tmp_path, act):
        net = init_network(9, 4, act, C_b=1.5, seed=0, bias="uniform")
        sidecar = save_network(net, tmp_path / "net.bin")
        back = load_network(tmp_path / "net.bin")
        assert_array_equal(back.W, net.W)
        assert_array_equal(back.a, net.a)
        assert_array_equal(back.b, net.b)
        assert back.C_b == 1.5 and back.act.kind == act.kind
        if act.kind == "randomized_poly":
            assert_array_equal(back.act.signs, net.act.signs)
        import json
        meta = json.loads(sidecar.read_text())
        assert meta["J"] == 9 and meta["d"] == 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a net")
        with pytest.raises(ValueError, match="checkpoint"):
            load_network(path)
