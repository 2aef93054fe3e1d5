import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmmiss.missingness import (
    CalibrationError,
    MaskError,
    Mechanism,
    MissingnessSpec,
    apply_mcar,
    apply_mechanism,
    apply_spec,
    calibrate_intercept,
    calibrated_spec,
    mask_invariant_holds,
    missingness_probability,
    default_spec,
)
from ssmmiss.ssm import make_condition, simulate


def fresh_series(T=500, seed=0, alpha=0.2, gamma=0.0, sigma2=0.25):
    return simulate(make_condition(sigma2, alpha, gamma), T, seed=seed)


def gauss_hermite_rate(beta0, slope, var, n=80):
    """Quadrature oracle for the marginal rate over a N(0, var) driver."""
    nodes, w = np.polynomial.hermite_e.hermegauss(n)
    x = nodes * np.sqrt(var)
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + np.exp(beta0 + slope * x))
    return float(np.sum(w * p) / np.sum(w))


class TestMcar:
    def test_zero_rate_unchanged(self):
        series = fresh_series(100)
        out = apply_mcar(series, 0.0, seed=1)
        assert not out.mask.any()

    def test_exact_count(self):
        series = fresh_series(500)
        out = apply_mcar(series, 0.30, seed=2)
        assert int(np.sum(np.all(out.mask[:, :3], axis=1))) == 150
        assert not out.mask[:, 3:].any()

    def test_deterministic(self):
        series = fresh_series(200)
        a = apply_mcar(series, 0.15, seed=7)
        b = apply_mcar(series, 0.15, seed=7)
        assert np.array_equal(a.mask, b.mask)

    def test_not_composable(self):
        series = apply_mcar(fresh_series(100), 0.2, seed=1)
        with pytest.raises(MaskError):
            apply_mcar(series, 0.2, seed=2)

    def test_input_untouched(self):
        series = fresh_series(100)
        apply_mcar(series, 0.3, seed=1)
        assert not series.mask.any()

    def test_independent_of_truth(self):
        series = fresh_series(50_000, alpha=0.7)
        out = apply_mcar(series, 0.3, seed=3)
        ind = out.mask[:, 0].astype(float)
        r = np.corrcoef(ind, series.truth.x[:, 0])[0, 1]
        assert abs(r) < 0.02


class TestProbability:
    def test_default_intercept_at_zero_driver(self):
        spec = MissingnessSpec(Mechanism.MAR, 0.15, beta0=4.0, beta_slope=-3.5)
        assert missingness_probability(spec, 0.0) == pytest.approx(0.01798620996, abs=1e-8)

    def test_symmetric_logistic(self):
        spec = MissingnessSpec(Mechanism.MNAR, 0.5, beta0=0.0, beta_slope=0.0)
        for d in (-3.0, 0.0, 11.0):
            assert missingness_probability(spec, d) == 0.5

    def test_tmar_mean_probability_near_target(self):
        spec = default_spec(Mechanism.TMAR, 0.15)
        probs = [missingness_probability(spec, d) for d in range(1, 11)]
        mean = float(np.mean(probs))
        assert mean == pytest.approx(0.14366541, abs=1e-6)
        assert abs(mean - 0.15) < 0.01

    def test_mcar_has_no_probability(self):
        spec = MissingnessSpec(Mechanism.MCAR, 0.15)
        with pytest.raises(MaskError):
            missingness_probability(spec, 1.0)


class TestApplyMechanism:
    def test_huge_intercept_masks_nothing(self):
        series = fresh_series(2000)
        spec = MissingnessSpec(Mechanism.MNAR, 0.3, beta0=50.0, beta_slope=0.0)
        out = apply_mechanism(series, spec, seed=1)
        assert not out.mask.any()

    def test_mnar_empirical_rate_matches_quadrature(self):
        # the default 30% pair is (1.5, -3); the marginal implied by the
        # formula at alpha = 0.7 is ~0.371 (quadrature oracle), not 0.30
        series = fresh_series(100_000, alpha=0.7)
        spec = MissingnessSpec(Mechanism.MNAR, 0.3, beta0=1.5, beta_slope=-3.0)
        out = apply_mechanism(series, spec, seed=5)
        expected = gauss_hermite_rate(1.5, -3.0, 1.0 / (1.0 - 0.49))
        assert expected == pytest.approx(0.3711, abs=0.002)
        assert out.masked_fraction() == pytest.approx(expected, abs=0.01)

    def test_tmar_monotone_in_day(self):
        spec = MissingnessSpec(Mechanism.TMAR, 0.15, beta0=3.0, beta_slope=-0.2)
        counts = np.zeros(10)
        totals = np.zeros(10)
        for rep in range(200):
            series = fresh_series(500, seed=rep)
            out = apply_mechanism(series, spec, seed=1000 + rep)
            for d in range(1, 11):
                sel = out.day_index == d
                counts[d - 1] += np.sum(out.mask[sel, 0])
                totals[d - 1] += np.sum(sel)
        rates = counts / totals
        assert np.all(np.diff(rates) > 0)

    def test_mnar_mask_tracks_state(self):
        # negative slope in p = 1/(1+exp(b0 + b*x)) makes missingness increase
        # with the driver, so the mask indicator correlates positively with x1
        series = fresh_series(50_000, alpha=0.7)
        spec = MissingnessSpec(Mechanism.MNAR, 0.3, beta0=1.5, beta_slope=-3.0)
        out = apply_mechanism(series, spec, seed=2)
        r = np.corrcoef(out.mask[:, 0].astype(float), series.truth.x[:, 0])[0, 1]
        assert r > 0.3

    def test_atmar_first_row_never_masked(self):
        spec = MissingnessSpec(Mechanism.ATMAR, 0.3, beta0=-50.0, beta_slope=0.0)
        series = fresh_series(200)
        out = apply_mechanism(series, spec, seed=3)
        assert not out.mask[0].any()
        assert out.mask[1:, 0].all()  # beta0 = -50 masks everything else

    def test_atmar_driver_is_previous_state(self):
        # slope so extreme the mask is a near-deterministic threshold on
        # x1(t-1); compare away from zero where the logistic saturates
        series = fresh_series(2000, alpha=0.7)
        spec = MissingnessSpec(Mechanism.ATMAR, 0.3, beta0=0.0, beta_slope=-200.0)
        out = apply_mechanism(series, spec, seed=4)
        driver = series.truth.x[:-1, 0]
        saturated = np.abs(driver) > 0.1
        assert np.array_equal(out.mask[1:, 0][saturated], (driver > 0)[saturated])

    def test_requires_truth(self):
        series = fresh_series(50)
        series.truth = None
        spec = MissingnessSpec(Mechanism.MNAR, 0.3, beta0=1.5, beta_slope=-3.0)
        with pytest.raises(MaskError):
            apply_mechanism(series, spec, seed=1)

    def test_mcar_spec_rejected(self):
        with pytest.raises(MaskError):
            apply_mechanism(fresh_series(50), MissingnessSpec(Mechanism.MCAR, 0.3), seed=1)

    @given(
        mech=st.sampled_from([Mechanism.MCAR, Mechanism.MAR, Mechanism.TMAR, Mechanism.ATMAR, Mechanism.MNAR]),
        seed=st.integers(min_value=0, max_value=10_000),
    )
    @settings(max_examples=20, deadline=None)
    def test_mask_invariant_all_mechanisms(self, mech, seed):
        series = fresh_series(300, seed=seed % 7)
        spec = default_spec(mech, 0.3)
        out = apply_spec(series, spec, seed=seed)
        assert mask_invariant_holds(out)


class TestCalibration:
    def test_closed_form_flat_slope(self):
        params = make_condition(0.25, 0.2, 0.0)
        beta0 = calibrate_intercept(Mechanism.MNAR, params, 0.30, slope=0.0, seed=1)
        # rate tolerance 0.005 translates to ~0.024 on the intercept here
        assert beta0 == pytest.approx(np.log(7.0 / 3.0), abs=0.03)

    def test_mar_intercept_near_default(self):
        params = make_condition(0.25, 0.2, 0.0)
        beta0 = calibrate_intercept(Mechanism.MAR, params, 0.15, slope=-3.5, seed=2)
        assert abs(beta0 - 4.0) < 1.0

    def test_tmar_intercept_near_default(self):
        params = make_condition(0.25, 0.2, 0.0)
        beta0 = calibrate_intercept(Mechanism.TMAR, params, 0.15, slope=-0.2, seed=3)
        # exact solution of mean_D sigmoid(0.2 D - beta0) = 0.15 is 2.9474
        assert beta0 == pytest.approx(2.9474, abs=0.1)
        assert abs(beta0 - 3.0) < 0.5

    def test_non_bracketing_raises(self):
        params = make_condition(0.25, 0.2, 0.0)
        with pytest.raises(CalibrationError, match="not bracketed"):
            calibrate_intercept(Mechanism.MNAR, params, 1e-28, slope=0.0, seed=4)

    def test_mcar_needs_no_calibration(self):
        params = make_condition(0.25, 0.2, 0.0)
        with pytest.raises(MaskError):
            calibrate_intercept(Mechanism.MCAR, params, 0.15, slope=0.0, seed=5)

    def test_calibrated_spec_hits_rate(self):
        params = make_condition(0.25, 0.7, 0.0)
        spec = calibrated_spec(Mechanism.MNAR, params, 0.30, seed=6)
        assert spec.calibrated
        rates = []
        for rep in range(100):
            series = simulate(params, 500, seed=rep)
            rates.append(apply_spec(series, spec, seed=10_000 + rep).masked_fraction())
        assert float(np.mean(rates)) == pytest.approx(0.30, abs=0.02)

    def test_default_spec_lookup(self):
        spec = default_spec(Mechanism.MAR, 0.15)
        assert (spec.beta0, spec.beta_slope) == (4.0, -3.5)
        spec = default_spec(Mechanism.TMAR, 0.30)
        assert (spec.beta0, spec.beta_slope) == (2.0, -0.2)
        with pytest.raises(ValueError):
            default_spec(Mechanism.MAR, 0.22)
