import numpy as np
import pytest

from helpers import joint_gaussian_loglik, random_mask, random_stationary_params
from ssmmiss.kalman import (
    FilterState,
    SingularInnovationError,
    default_init,
    diffuse_init,
    filter_series,
    measurement_update,
    time_update,
)
from ssmmiss.ssm import MaskedSeries, ModelParams, make_condition, simulate, stationary_covariance


def info_form_update(state, z_row, mask_row, params):
    """The information-form measurement update, as an equivalence oracle."""
    obs = ~np.asarray(mask_row, dtype=bool)
    H = params.H[obs]
    R_inv = np.diag(1.0 / np.diag(params.R)[obs])
    P = np.linalg.inv(np.linalg.inv(state.P) + H.T @ R_inv @ H)
    x = state.x + P @ H.T @ R_inv @ (np.asarray(z_row)[obs] - H @ state.x)
    return x, P


class TestTimeUpdate:
    def test_identity_dynamics(self):
        params = ModelParams(A=np.eye(2), H=np.zeros((6, 2)), Q=np.eye(2), R=np.eye(6))
        out = time_update(FilterState(np.array([1.0, 2.0]), np.eye(2)), params)
        assert np.allclose(out.x, [1.0, 2.0])
        assert np.allclose(out.P, 2.0 * np.eye(2))

    def test_zero_dynamics(self):
        params = ModelParams(A=np.zeros((2, 2)), H=np.zeros((6, 2)), Q=np.diag([2.0, 3.0]), R=np.eye(6))
        out = time_update(FilterState(np.array([5.0, -1.0]), np.eye(2)), params)
        assert np.allclose(out.x, 0.0)
        assert np.allclose(out.P, np.diag([2.0, 3.0]))

    def test_hand_computed_propagation(self):
        params = ModelParams(
            A=np.array([[0.7, 0.3], [0.0, 0.7]]), H=np.zeros((6, 2)), Q=np.eye(2), R=np.eye(6)
        )
        out = time_update(FilterState(np.array([1.0, 0.0]), np.eye(2)), params)
        assert np.allclose(out.x, [0.7, 0.0])
        assert np.allclose(out.P, [[1.58, 0.21], [0.21, 1.49]])


class TestMeasurementUpdate:
    def test_fully_masked_is_identity_with_zero_increment(self):
        params = make_condition(0.25, 0.2, 0.0)
        state = FilterState(np.array([0.3, -0.2]), stationary_covariance(params))
        out, inc = measurement_update(state, np.full(6, np.nan), np.ones(6, dtype=bool), params)
        assert inc == 0.0
        assert np.array_equal(out.x, state.x)
        assert np.array_equal(out.P, state.P)

    def test_scalar_conjugate_update(self):
        params = ModelParams(A=np.zeros((1, 1)), H=np.ones((1, 1)), Q=np.eye(1), R=np.eye(1))
        out, inc = measurement_update(
            FilterState(np.zeros(1), np.eye(1)), np.array([2.0]), np.array([False]), params
        )
        assert out.x[0] == pytest.approx(1.0)
        assert out.P[0, 0] == pytest.approx(0.5)
        assert inc == pytest.approx(-0.5 * (np.log(2 * np.pi) + np.log(2.0) + 4.0 / 2.0))

    def test_partial_mask_matches_joint_conditioning_oracle(self):
        # condition the 8-dimensional joint of (x, z) on the observed block
        rng = np.random.default_rng(0)
        for _ in range(20):
            params = random_stationary_params(rng)
            P = stationary_covariance(params)
            x_bar = rng.normal(size=2)
            z = rng.normal(size=6)
            mask = np.array([True, True, True, False, False, False])
            obs = ~mask
            H = params.H
            joint_cov = np.block([[P, P @ H.T], [H @ P, H @ P @ H.T + params.R]])
            idx = 2 + np.flatnonzero(obs)
            S = joint_cov[np.ix_(idx, idx)]
            cross = joint_cov[np.ix_([0, 1], idx)]
            mean_or = x_bar + cross @ np.linalg.solve(S, z[obs] - H[obs] @ x_bar)
            cov_or = P - cross @ np.linalg.solve(S, cross.T)

            out, _ = measurement_update(FilterState(x_bar, P), z, mask, params)
            assert np.allclose(out.x, mean_or, atol=1e-10)
            assert np.allclose(out.P, cov_or, atol=1e-10)

    def test_information_form_equivalence(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            params = random_stationary_params(rng)
            P = stationary_covariance(params) + 0.1 * np.eye(2)
            state = FilterState(rng.normal(size=2), P)
            z = rng.normal(size=6)
            mask = rng.random(6) < 0.4
            if mask.all():
                mask[0] = False
            out, _ = measurement_update(state, z, mask, params)
            x_or, P_or = info_form_update(state, z, mask, params)
            assert np.allclose(out.x, x_or, atol=1e-10)
            assert np.allclose(out.P, P_or, atol=1e-10)

    def test_near_zero_measurement_error(self):
        rng = np.random.default_rng(2)
        params = random_stationary_params(rng)
        params = ModelParams(A=params.A, H=params.H, Q=params.Q, R=1e-8 * np.eye(6))
        P = stationary_covariance(params)
        z = rng.normal(size=6)
        out, _ = measurement_update(FilterState(np.zeros(2), P), z, np.zeros(6, dtype=bool), params)
        x_or, P_or = info_form_update(FilterState(np.zeros(2), P), z, np.zeros(6, dtype=bool), params)
        assert np.allclose(out.x, x_or, atol=1e-8)

    def test_singular_innovation_raises(self):
        params = ModelParams(A=np.zeros((2, 2)), H=np.zeros((6, 2)), Q=np.eye(2), R=np.zeros((6, 6)))
        with pytest.raises(SingularInnovationError):
            measurement_update(
                FilterState(np.zeros(2), np.eye(2)), np.zeros(6), np.zeros(6, dtype=bool), params
            )


class TestFilterSeries:
    def test_complete_data_loglik_matches_dense_gaussian(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            params = random_stationary_params(rng)
            series = simulate(params, 3, seed=int(rng.integers(1_000_000)))
            out = filter_series(series, params)
            oracle = joint_gaussian_loglik(params, series.z, series.mask, stationary_covariance(params))
            assert out.loglik == pytest.approx(oracle, rel=1e-8)

    def test_masked_rows_loglik_matches_marginal_density(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            params = random_stationary_params(rng)
            series = simulate(params, 5, seed=int(rng.integers(1_000_000)))
            series.mask[[1, 3], :3] = True
            out = filter_series(series, params)
            oracle = joint_gaussian_loglik(params, series.z, series.mask, stationary_covariance(params))
            assert out.loglik == pytest.approx(oracle, rel=1e-8)

    def test_all_masked_pure_prediction(self):
        params = make_condition(0.25, 0.7, 0.0)
        series = simulate(params, 200, seed=9)
        series.mask[:] = True
        init = FilterState(np.zeros(2), 0.1 * np.eye(2))
        out = filter_series(series, params, init=init)
        assert out.loglik == 0.0
        S = stationary_covariance(params)
        first_gap = np.max(np.abs(out.predicted_covs[0] - S))
        last_gap = np.max(np.abs(out.predicted_covs[-1] - S))
        assert last_gap < first_gap
        assert last_gap < 1e-6
        assert np.array_equal(out.filtered_means, out.predicted_means)

    def test_equivalent_to_composed_updates(self):
        rng = np.random.default_rng(5)
        params = random_stationary_params(rng)
        series = simulate(params, 40, seed=11)
        series.mask[:] = random_mask(rng, 40)
        out = filter_series(series, params)
        state = default_init(params)
        ll = 0.0
        for t in range(40):
            if t > 0:
                state = time_update(state, params)
            assert np.allclose(out.predicted_means[t], state.x, atol=1e-10)
            assert np.allclose(out.predicted_covs[t], state.P, atol=1e-10)
            state, inc = measurement_update(state, series.z[t], series.mask[t], params)
            ll += inc
            assert np.allclose(out.filtered_means[t], state.x, atol=1e-10)
        assert out.loglik == pytest.approx(ll, rel=1e-12)

    def test_block_permutation_invariance(self):
        rng = np.random.default_rng(6)
        params = make_condition(0.25, 0.7, 0.15)
        series = simulate(params, 100, seed=12)
        series.mask[:] = random_mask(rng, 100)
        base = filter_series(series, params).loglik
        perm = [2, 0, 1, 3, 4, 5]  # permute the first indicator block
        params_p = ModelParams(A=params.A, H=params.H[perm], Q=params.Q, R=np.diag(np.diag(params.R)[perm]))
        series_p = MaskedSeries(
            z=series.z[:, perm], mask=series.mask[:, perm], day_index=series.day_index
        )
        assert filter_series(series_p, params_p).loglik == pytest.approx(base, rel=1e-12)

    def test_covariances_stay_psd(self):
        rng = np.random.default_rng(7)
        for s2, a, g in [(0.25, 0.2, 0.0), (0.75, 0.7, 0.3)]:
            params = make_condition(s2, a, g)
            series = simulate(params, 200, seed=13)
            series.mask[:] = random_mask(rng, 200)
            out = filter_series(series, params)
            for covs in (out.filtered_covs, out.predicted_covs):
                assert np.max(np.abs(covs - covs.transpose(0, 2, 1))) <= 1e-10
                eig = np.linalg.eigvalsh(covs)
                assert eig.min() >= -1e-10

    def test_diffuse_init_option(self):
        params = make_condition(0.25, 0.2, 0.0)
        init = diffuse_init(params)
        assert np.allclose(init.P, 1e7 * np.eye(2))
        series = simulate(params, 50, seed=14)
        out = filter_series(series, params, init=init)
        assert np.isfinite(out.loglik)

    def test_empty_series_rejected(self):
        params = make_condition(0.25, 0.2, 0.0)
        series = simulate(params, 1, seed=15)
        filter_series(series, params)  # T = 1 works
        series.z = series.z[:0]
        series.mask = series.mask[:0]
        series.day_index = series.day_index[:0]
        with pytest.raises(ValueError):
            filter_series(series, params)
