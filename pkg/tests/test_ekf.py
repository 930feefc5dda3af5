from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from securetrack.ekf import (
    A,
    LN10,
    EkfBelief,
    FilterConfig,
    FilterNumericalError,
    NoiseModel,
    TargetState,
    _regularise,
    cv_process_noise,
    initial_belief,
    measurement_jacobian_h,
    measurement_update,
    multilaterate,
    noise_jacobian_v,
    predicted_sq_distances,
    time_update,
)

ZERO_Q = NoiseModel(q=np.zeros((4, 4)))


def belief(mean, cov=None):
    return EkfBelief(np.asarray(mean, float), np.eye(4) if cov is None else np.asarray(cov, float))


class TestTimeUpdate:
    def test_zero_state_is_a_fixed_point(self):
        P = np.diag([4.0, 1.0, 9.0, 2.0])
        out = time_update(belief([0, 0, 0, 0], P), ZERO_Q)
        assert np.array_equal(out.mean, np.zeros(4))
        np.testing.assert_allclose(out.cov, A @ P @ A.T)

    def test_constant_velocity_step(self):
        out = time_update(belief([1, 2, 3, 4]), ZERO_Q)
        assert out.mean.tolist() == [3, 2, 7, 4]

    def test_identity_covariance_propagation(self):
        out = time_update(belief([0, 0, 0, 0]), ZERO_Q)
        assert out.cov[0, 0] == 2.0
        np.testing.assert_allclose(out.cov, A @ A.T)

    def test_process_noise_is_added(self):
        q = cv_process_noise(0.5)
        out = time_update(belief([0, 0, 0, 0]), NoiseModel(q=q))
        np.testing.assert_allclose(out.cov, A @ A.T + q)


def test_cv_process_noise_blocks():
    q = cv_process_noise(3.0)
    np.testing.assert_allclose(q[:2, :2], [[1.0, 1.5], [1.5, 3.0]])
    assert np.all(q[:2, 2:] == 0)
    assert np.linalg.eigvalsh(q).min() >= -1e-12


class TestJacobians:
    def test_h_row(self):
        H = measurement_jacobian_h(TargetState(1.0, 0.0, 2.0, 0.0), [(4.0, 6.0)])
        assert H.tolist() == [[-6.0, 0.0, -8.0, 0.0]]

    def test_h_row_on_anchor_is_zero(self):
        H = measurement_jacobian_h([4.0, 9.0, 6.0, -1.0], [(4.0, 6.0)])
        assert not H.any()

    def test_h_rows_are_local(self):
        m = [1.0, 0.0, 2.0, 0.0]
        H = measurement_jacobian_h(m, [(4.0, 6.0), (-3.0, 5.0)])
        assert H.shape == (2, 4)
        np.testing.assert_array_equal(H[0], measurement_jacobian_h(m, [(4.0, 6.0)])[0])
        np.testing.assert_array_equal(H[1], measurement_jacobian_h(m, [(-3.0, 5.0)])[0])

    def test_h_needs_an_anchor(self):
        with pytest.raises(ValueError):
            measurement_jacobian_h([0, 0, 0, 0], np.empty((0, 2)))

    def test_v_on_anchor_is_zero(self):
        V = noise_jacobian_v([2.0, 0.0, 3.0, 0.0], [(2.0, 3.0)], 10.0)
        assert V[0, 0] == 0.0

    def test_v_value(self):
        V = noise_jacobian_v([3.0, 0.0, 4.0, 0.0], [(0.0, 0.0)], 10.0)
        assert V[0, 0] == pytest.approx(-5.7565, abs=1e-4)

    def test_v_cancellation(self):
        V = noise_jacobian_v([1.0, 0.0, 0.0, 0.0], [(0.0, 0.0)], math.log(10.0))
        assert V[0, 0] == pytest.approx(-1.0, rel=1e-12)

    def test_v_is_diagonal(self):
        V = noise_jacobian_v([1.0, 0.0, 2.0, 0.0], [(0, 0), (5, 5), (9, 1)], 20.0)
        assert np.count_nonzero(V - np.diag(np.diag(V))) == 0

    def test_v_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            noise_jacobian_v([0, 0, 0, 0], [(1, 1)], 0.0)

    def test_h_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        eps = 1e-5
        for _ in range(100):
            m = rng.uniform(-50, 150, 4)
            anchors = rng.uniform(0, 100, (rng.integers(1, 8), 2))
            H = measurement_jacobian_h(m, anchors)
            num = np.zeros_like(H)
            for j in range(4):
                up, dn = m.copy(), m.copy()
                up[j] += eps
                dn[j] -= eps
                num[:, j] = (predicted_sq_distances(up, anchors)
                             - predicted_sq_distances(dn, anchors)) / (2 * eps)
            scale = np.maximum(np.abs(H), 1.0)
            assert np.max(np.abs(num - H) / scale) <= 1e-6

    def test_v_matches_derivative_of_measurement_in_shadowing(self):
        # z = d^2 * 10^(-n/alpha), so dz/dn at n=0 is -(ln10/alpha) d^2.
        alpha, d2, eps = 20.0, 37.0, 1e-6
        num = (d2 * 10 ** (-eps / alpha) - d2 * 10 ** (eps / alpha)) / (2 * eps)
        V = noise_jacobian_v([math.sqrt(d2), 0.0, 0.0, 0.0], [(0.0, 0.0)], alpha)
        assert V[0, 0] == pytest.approx(num, rel=1e-6)


class TestMeasurementUpdate:
    anchors = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])

    def test_exact_prediction_leaves_mean(self):
        prior = belief([10, 1, 20, -1], np.eye(4) * 5)
        z = predicted_sq_distances(prior.mean, self.anchors)
        post, innov = measurement_update(prior, z, self.anchors, NoiseModel(), 20.0)
        np.testing.assert_allclose(post.mean, prior.mean)
        assert np.all(innov == 0)

    def test_prior_on_every_anchor_is_uninformative(self):
        prior = belief([3.0, 0.0, 4.0, 0.0], np.eye(4) * 2)
        anchors = np.array([[3.0, 4.0], [3.0, 4.0]])
        post, _ = measurement_update(prior, [7.0, 9.0], anchors, NoiseModel(), 20.0)
        assert np.array_equal(post.mean, prior.mean)
        assert np.array_equal(post.cov, prior.cov)

    def test_scalar_analogue(self):
        # One anchor on the x axis: H = [2, 0, 0, 0]. With P_xx = 1/4 and an
        # effective measurement variance of 1, HPH^T = 1 and the gain halves
        # the variance.
        alpha = 20.0
        prior = belief([1.0, 0.0, 0.0, 0.0], np.diag([0.25, 1.0, 1.0, 1.0]))
        z = 1.2
        v = -(LN10 / alpha) * z
        noise = NoiseModel(q=np.zeros((4, 4)), r_db=1.0 / v**2)
        post, innov = measurement_update(prior, [z], [(0.0, 0.0)], noise, alpha)
        gain_times_h = (post.mean[0] - prior.mean[0]) / innov[0] * 2.0
        assert gain_times_h == pytest.approx(0.5, rel=1e-12)
        assert post.cov[0, 0] == pytest.approx(0.5 * 0.25, rel=1e-12)

    def test_predicted_scale_mode_uses_prior_distance(self):
        alpha = 20.0
        prior = belief([1.0, 0.0, 0.0, 0.0], np.diag([0.25, 1.0, 1.0, 1.0]))
        v = -(LN10 / alpha) * 1.0
        noise = NoiseModel(q=np.zeros((4, 4)), r_db=1.0 / v**2, noise_scale="predicted")
        post, _ = measurement_update(prior, [3.0], [(0.0, 0.0)], noise, alpha)
        assert post.cov[0, 0] == pytest.approx(0.125, rel=1e-12)

    def test_huge_measurement_noise_keeps_prior(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            prior = belief(rng.uniform(0, 100, 4), np.diag(rng.uniform(1, 100, 4)))
            anchors = rng.uniform(0, 100, (6, 2))
            z = predicted_sq_distances(prior.mean, anchors) * rng.uniform(0.5, 2.0, 6)
            post, _ = measurement_update(prior, z, anchors, NoiseModel(r_db=0.25e12), 20.0)
            assert np.max(np.abs(post.position - prior.position)) <= 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            measurement_update(belief([0, 0, 0, 0]), [1.0, 2.0], self.anchors, NoiseModel(), 20.0)

    def test_posterior_psd_over_random_updates(self):
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            m = np.array([rng.uniform(0, 100), rng.normal(), rng.uniform(0, 100), rng.normal()])
            L = rng.normal(size=(4, 4)) * rng.uniform(0.1, 10)
            P = L @ L.T + 1e-6 * np.eye(4)
            n = int(rng.integers(1, 8))
            anchors = rng.uniform(0, 100, (n, 2))
            z = rng.uniform(0.1, 2e4, n)
            noise = NoiseModel(r_db=rng.uniform(0.01, 4.0))
            post, _ = measurement_update(belief(m, P), z, anchors, noise, rng.uniform(5, 40))
            assert np.array_equal(post.cov, post.cov.T)
            assert np.linalg.eigvalsh(post.cov).min() >= -1e-8


def test_regularise_leaves_well_conditioned_matrix():
    S = np.diag([1.0, 2.0])
    assert np.array_equal(_regularise(S), S)


def test_regularise_adds_ridge_to_singular_matrix():
    S = np.array([[1.0, 1.0], [1.0, 1.0]])
    out = _regularise(S)
    assert np.linalg.eigvalsh(out).min() > 0
    np.testing.assert_allclose(out - S, 1e-9 * np.eye(2))


def test_regularise_gives_up_on_zero_matrix():
    with pytest.raises(FilterNumericalError):
        _regularise(np.zeros((3, 3)))


@given(x=st.floats(-50, 150), y=st.floats(-50, 150))
@settings(max_examples=50)
def test_multilateration_is_exact_without_noise(x, y):
    anchors = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [70.0, 80.0]])
    z = predicted_sq_distances([x, 0, y, 0], anchors)
    np.testing.assert_allclose(multilaterate(anchors, z), [x, y], atol=1e-6)


def test_initial_belief_fallback_is_centroid():
    anchors = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    b = initial_belief(anchors, pos_var=50.0, vel_var=2.0)
    assert b.mean.tolist() == [10 / 3, 0.0, 10 / 3, 0.0]
    assert np.diag(b.cov).tolist() == [50.0, 2.0, 50.0, 2.0]


def test_initial_belief_uses_ranges_when_given():
    anchors = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    z = predicted_sq_distances([2.0, 0, 7.0, 0], anchors)
    b = initial_belief(anchors, z)
    np.testing.assert_allclose(b.position, [2.0, 7.0], atol=1e-9)
    assert b.mean[1] == b.mean[3] == 0.0


def test_noiseless_straight_line_converges():
    rng = np.random.default_rng(3)
    anchors = rng.uniform(0, 100, (5, 2))
    alpha = 20.0
    noise = NoiseModel.from_params(q_accel=1e-4, sigma_db=0.0)
    truth = np.array([10.0, 10.0]) + np.arange(60)[:, None] * np.array([0.8, 0.8])
    b = initial_belief(anchors)
    for k, pos in enumerate(truth):
        b = time_update(b, noise)
        b, _ = measurement_update(b, ((pos - anchors) ** 2).sum(axis=1), anchors, noise, alpha)
        if k == 50:
            assert np.hypot(*(b.position - pos)) <= 0.5


@pytest.mark.parametrize("kwargs", [{"q": np.eye(3)}, {"q": -np.eye(4)}, {"r_db": 0.0},
                                    {"noise_scale": "prior"}])
def test_noise_model_validation(kwargs):
    with pytest.raises(ValueError):
        NoiseModel(**kwargs)


@pytest.mark.parametrize("kwargs", [{"q_accel": -1.0}, {"init": "origin"}, {"pos_var": 0.0},
                                    {"noise_scale": "x"}])
def test_filter_config_validation(kwargs):
    with pytest.raises(ValueError):
        FilterConfig(**kwargs)


def test_zero_shadowing_keeps_positive_variance():
    assert NoiseModel.from_params(sigma_db=0.0).r_db > 0


def test_target_state_round_trip():
    s = TargetState(1.0, 2.0, 3.0, 4.0)
    assert TargetState.from_array(s.as_array()) == s
    assert s.position.tolist() == [1.0, 3.0]
