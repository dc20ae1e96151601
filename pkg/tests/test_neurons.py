"""Neuron model tests: frozen step examples, surrogates, Jacobian checks."""

import numpy as np
import pytest

from hypr.errors import ConfigError
from hypr.network import LayerParams, init_layer
from hypr.neurons import (
    ModelKind,
    decay_from_raw,
    frozen_step_closure,
    jacobians,
    raw_from_tau,
    step,
    threshold_distance,
)
from hypr.scan import finite_difference_jacobian
from hypr.surrogates import Surrogate, surrogate_double_gaussian, surrogate_slayer

from oracle_helpers import rel_error


def make_layer(kind, consts=None, fixed=None, m=1, d_in=1, surrogate=None):
    base_fixed = {
        ModelKind.BRF: {"theta": 1.0, "dt": 0.01, "q_decay": 0.9},
        ModelKind.SE_ADLIF: {
            "theta": 1.0, "rho": 120.0,
            "tau_u_range": (5.0, 25.0), "tau_w_range": (60.0, 300.0),
        },
        ModelKind.ALIF: {
            "theta": 1.0, "alpha": np.full(m, 0.5), "rho": np.full(m, 0.5),
            "beta": 0.0, "b_0": 1.0,
        },
        ModelKind.LI: {"alpha": np.full(m, 0.5)},
    }[ModelKind(kind)]
    base_consts = {
        ModelKind.BRF: {"omega": np.zeros(m), "b_offset": np.zeros(m)},
        ModelKind.SE_ADLIF: {
            "a_hat": np.full(m, 0.5), "b_hat": np.full(m, 0.5),
            "tau_u_raw": raw_from_tau(np.full(m, 10.0), 5.0, 25.0),
            "tau_w_raw": raw_from_tau(np.full(m, 100.0), 60.0, 300.0),
        },
        ModelKind.ALIF: {},
        ModelKind.LI: {},
    }[ModelKind(kind)]
    base_fixed.update(fixed or {})
    base_consts.update(consts or {})
    return LayerParams(
        kind=ModelKind(kind),
        w_ff=np.zeros((m, d_in)),
        w_rec=None,
        bias=np.zeros(m),
        consts=base_consts,
        fixed=base_fixed,
        surrogate=surrogate or Surrogate(),
    )


class TestSurrogates:
    def test_slayer_at_zero(self):
        assert surrogate_slayer(0.0) == pytest.approx(1.0)

    def test_slayer_decay(self):
        assert surrogate_slayer(50.0) < 1e-40
        assert surrogate_slayer(-50.0) < 1e-40

    def test_slayer_closed_form_point(self):
        # 5 * 0.2 * exp(-1) at x = -0.2
        assert surrogate_slayer(-0.2) == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_double_gaussian_at_zero(self):
        val = 0.5 * (1.15 / (0.5 * np.sqrt(2 * np.pi)) - 0.3 / (3.0 * np.sqrt(2 * np.pi)))
        assert surrogate_double_gaussian(0.0) == pytest.approx(val, rel=1e-12)
        assert val == pytest.approx(0.4388, abs=5e-4)

    def test_double_gaussian_even(self):
        x = np.linspace(0.0, 8.0, 101)
        np.testing.assert_array_equal(
            surrogate_double_gaussian(x), surrogate_double_gaussian(-x)
        )

    def test_double_gaussian_decay(self):
        assert abs(surrogate_double_gaussian(40.0)) < 1e-40

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            Surrogate(kind="rectangle")


class TestStepExamples:
    def test_brf_zero_frequency(self):
        layer = make_layer("brf")
        s_prev = np.zeros((1, 3))
        s_new, y = step(layer, s_prev, np.array([1.0]))
        assert s_new[0, 0] == pytest.approx(0.01)
        assert s_new[0, 1] == 0.0
        assert y[0] == 0.0  # 0.01 < theta

    def test_brf_no_reset_after_spike(self):
        # u keeps integrating after a spike; only q jumps
        layer = make_layer("brf", fixed={"theta": 0.005})
        s_prev = np.zeros((1, 3))
        s1, y1 = step(layer, s_prev, np.array([1.0]))
        assert y1[0] == 1.0
        assert s1[0, 0] == pytest.approx(0.01)  # membrane untouched
        assert s1[0, 2] == 1.0  # q = 0.9 * 0 + z

    def test_li_fixed_point(self):
        layer = make_layer("li")
        s_new, y = step(layer, np.array([[1.0]]), np.array([1.0]))
        assert y[0] == pytest.approx(1.0)

    def test_alif_spike(self):
        layer = make_layer("alif")
        s_prev = np.zeros((1, 3))
        s_new, y = step(layer, s_prev, np.array([3.0]))
        assert s_new[0, 0] == pytest.approx(1.5)
        assert y[0] == 1.0

    def test_se_adlif_hard_reset(self):
        layer = make_layer("se_adlif", fixed={"theta": 0.1})
        alpha = decay_from_raw(layer.consts["tau_u_raw"], 5.0, 25.0)[0][0]
        s_prev = np.zeros((1, 3))
        cur = np.array([5.0])
        s_new, y = step(layer, s_prev, cur)
        u_hat = (1 - alpha) * 5.0
        assert u_hat > 0.1
        assert y[0] == 1.0
        assert s_new[0, 0] == 0.0  # reset to zero same step

    def test_spikes_are_binary(self):
        rng = np.random.default_rng(0)
        for kind in ("brf", "se_adlif", "alif"):
            layer = init_layer(kind, 16, 4, rng)
            s = np.zeros((16, 3))
            for _ in range(50):
                cur = rng.normal(size=16) * 3.0
                s, y = step(layer, s, cur)
                assert set(np.unique(y)).issubset({0.0, 1.0})
                assert set(np.unique(s[:, 2])).issubset({0.0, 1.0}) or kind == "brf"

    def test_li_bounded_by_input(self):
        layer = make_layer("li", m=4, fixed={"alpha": np.full(4, 0.7)})
        rng = np.random.default_rng(1)
        s = np.zeros((4, 1))
        bound = 2.0
        for _ in range(200):
            cur = rng.uniform(-bound, bound, size=4)
            s, y = step(layer, s, cur)
            assert np.all(np.abs(y) <= bound + 1e-12)


class TestBrfValidation:
    def test_rejects_unstable_frequency(self):
        with pytest.raises(ConfigError):
            make_layer("brf", consts={"omega": np.array([150.0])})

    def test_accepts_fast_but_stable(self):
        make_layer("brf", consts={"omega": np.array([50.0])})


class TestJacobianExamples:
    def test_li_jacobian(self):
        layer = make_layer("li")
        a, d = jacobians(layer, np.array([[0.3]]), np.array([0.7]))
        assert a[0, 0, 0] == pytest.approx(0.5)
        assert d[0, 0] == pytest.approx(0.5)

    def test_se_adlif_spike_row_far_below_threshold(self):
        layer = make_layer("se_adlif", surrogate=Surrogate(kind="slayer", alpha=5.0, c=0.2))
        alpha = decay_from_raw(layer.consts["tau_u_raw"], 5.0, 25.0)[0][0]
        # choose current so that u_hat - theta = -10
        cur = np.array([(1.0 - 10.0) / (1.0 - alpha)])
        s_prev = np.zeros((1, 3))
        assert threshold_distance(layer, s_prev, cur)[0] == pytest.approx(-10.0)
        a, d = jacobians(layer, s_prev, cur)
        assert abs(a[0, 2, 0]) <= 1e-20
        assert abs(d[0, 2]) <= 1e-20

    def test_brf_smooth_block_matches_fd(self):
        rng = np.random.default_rng(2)
        layer = init_layer("brf", 6, 3, rng)
        s_prev = rng.normal(size=(6, 3))
        s_prev[:, 2] = np.abs(s_prev[:, 2])
        cur = rng.normal(size=6)
        dist = threshold_distance(layer, s_prev, cur)
        a, d = jacobians(layer, s_prev, cur)
        for i in range(6):
            if abs(dist[i]) < 0.1:
                continue
            fn = frozen_step_closure(layer, i, s_prev[i], float(cur[i]))
            jac = finite_difference_jacobian(fn, np.concatenate([s_prev[i], [cur[i]]]))
            for row in (0, 1):
                assert rel_error(
                    np.concatenate([a[i, row], [d[i, row]]]), jac[row]
                ) < 1e-5


class TestTimeConstantSquash:
    def test_round_trip(self):
        taus = np.array([5.5, 12.0, 24.5])
        raw = raw_from_tau(taus, 5.0, 25.0)
        dec, _ = decay_from_raw(raw, 5.0, 25.0)
        np.testing.assert_allclose(dec, np.exp(-1.0 / taus), rtol=1e-9)

    def test_derivative_matches_fd(self):
        raw = np.array([0.3])
        dec, ddec = decay_from_raw(raw, 5.0, 25.0)
        h = 1e-6
        fd = (decay_from_raw(raw + h, 5.0, 25.0)[0] - decay_from_raw(raw - h, 5.0, 25.0)[0]) / (2 * h)
        np.testing.assert_allclose(ddec, fd, rtol=1e-7)


class TestJacobianSuite:
    def test_full_sweep(self):
        from hypr.verify import jacobian_suite

        res = jacobian_suite(n_points=30, seed=4)
        assert res.passed, res.line()
