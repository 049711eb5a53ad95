import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from afcsim.correlation import CoincidenceHistogram
from afcsim.fitting import (GRAD_TOL, DoubleExponentialPeak, FitError, FitResult,
                            GaussianDecayRegressor, HoleScanRegressor, double_exponential_counts,
                            fit_double_exponential,
                            fit_gaussian_decay, fit_hole_scan, gaussian_decay, predict_g2_vs_storage,
                            raw_fwhm, storage_time_at_threshold, weighted_fit)
from afcsim.memory import spectral_hole_scan, spin_dephasing_efficiency
from afcsim.source import bandwidth_from_correlation_time, sample_delays

T_GRID = np.array([6, 8, 10, 12, 15, 18, 21, 25]) * 1e-6
ETA0 = 0.036 / spin_dephasing_efficiency(6e-6, 20e3)


def decay_points(seed, t=T_GRID, rel=0.05, eta0=ETA0, gamma=20e3):
    rng = np.random.default_rng(seed)
    truth = eta0 * spin_dephasing_efficiency(t, gamma)
    sigma = rel * truth
    return np.column_stack([t, truth + sigma * rng.standard_normal(len(t)), sigma])


def peak_histogram(seed, tau=89e-9, n_pairs=20_000, floor=20.0, bw=10e-9, span=1e-6):
    rng = np.random.default_rng(seed)
    d = sample_delays(n_pairs, tau, rng)
    nb = int(round(2 * span / bw))
    counts = np.histogram(d, bins=nb, range=(-span, span))[0] + rng.poisson(floor, nb)
    return CoincidenceHistogram(bw, (-span, span), counts, n_pairs)


def scan_points(seed, rel=0.05, fwhm=2.8e6, hole=0.8e6):
    rng = np.random.default_rng(seed)
    d = np.linspace(-8e6, 8e6, 33)
    truth = 1000 * spectral_hole_scan(fwhm, hole, d)
    sigma = rel * truth.max() * np.ones_like(d)
    return np.column_stack([d, truth + sigma * rng.standard_normal(len(d)), sigma])


def coverage(fits, name, truth):
    hits = [abs(f[name] - truth) <= 2 * f.uncertainties[name] for f in fits if f.converged]
    return sum(hits) / len(fits)


# spin decay ------------------------------------------------------------------------

def test_gaussian_decay_closure_coverage():
    fits = [fit_gaussian_decay(decay_points(s)) for s in range(100)]
    assert all(f.converged for f in fits)
    assert all(f.decrement <= GRAD_TOL for f in fits)
    assert all(v >= 0 for f in fits for v in f.uncertainties.values())
    assert coverage(fits, "gamma_inh", 20e3) >= 0.95


def test_gaussian_decay_noiseless_exact():
    pts = decay_points(0, rel=0.05)
    pts[:, 1] = ETA0 * spin_dephasing_efficiency(T_GRID, 20e3)
    f = fit_gaussian_decay(pts)
    assert f.converged
    assert f["gamma_inh"] == pytest.approx(20e3, rel=1e-8)
    assert f["eta_0"] == pytest.approx(ETA0, rel=1e-8)
    assert f.residual_norm < 1e-6


def test_gaussian_decay_uncertainty_grows_as_points_drop():
    pts = decay_points(0)
    pts[:, 1] = ETA0 * spin_dephasing_efficiency(T_GRID, 20e3)
    errs = [fit_gaussian_decay(pts[:k]).uncertainties["gamma_inh"] for k in range(8, 2, -1)]
    assert all(b > a for a, b in zip(errs, errs[1:]))


def test_gaussian_decay_bootstrap_spread_grows_as_points_drop():
    rng = np.random.default_rng(1)
    spreads = []
    for k in (8, 5, 3):
        vals = []
        for _ in range(60):
            pts = decay_points(int(rng.integers(1 << 30)))[:k]
            vals.append(fit_gaussian_decay(pts)["gamma_inh"])
        spreads.append(np.std(vals))
    assert spreads[0] < spreads[1] < spreads[2]


def test_gaussian_decay_one_over_sqrt_n():
    sizes, errs = [], []
    for reps in (1, 4, 16):
        t = np.repeat(T_GRID, reps)
        f = fit_gaussian_decay(decay_points(reps, t=t))
        sizes.append(len(t))
        errs.append(f.uncertainties["gamma_inh"])
    slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)


def test_gaussian_decay_requires_three_points():
    with pytest.raises(ValueError):
        fit_gaussian_decay(decay_points(0)[:2])


def test_weighted_fit_rejects_bad_sigma():
    with pytest.raises(ValueError):
        weighted_fit(gaussian_decay, T_GRID, np.ones(8), np.zeros(8), [1, 1e4], ["a", "b"], "x")


# coincidence peak --------------------------------------------------------------------

def test_double_exponential_closure_coverage():
    fits = [fit_double_exponential(peak_histogram(s)) for s in range(100)]
    assert coverage(fits, "tau_c", 89e-9) >= 0.95


def test_double_exponential_noiseless_exact():
    edges = np.linspace(-1e-6, 1e-6, 201)
    expected = double_exponential_counts(edges, 89e-9, 1e9, 5e7, 0.0)
    hist = CoincidenceHistogram(10e-9, (-1e-6, 1e-6), np.rint(expected), 0)
    f = fit_double_exponential(hist)
    assert f.converged
    assert f["tau_c"] == pytest.approx(89e-9, rel=1e-6)
    assert f["floor"] == pytest.approx(5e7, rel=1e-6)


def test_double_exponential_bandwidth_round_trip():
    f = fit_double_exponential(peak_histogram(3, tau=78.8e-9, n_pairs=2_000_000, floor=200))
    assert bandwidth_from_correlation_time(f["tau_c"]) == pytest.approx(2.8e6, rel=0.01)


def test_double_exponential_without_peak_not_converged():
    rng = np.random.default_rng(4)
    hist = CoincidenceHistogram(10e-9, (-1e-6, 1e-6), rng.poisson(50, 200), 0)
    assert not fit_double_exponential(hist).converged


# hole scan ---------------------------------------------------------------------------

def test_hole_scan_closure_coverage():
    fits = [fit_hole_scan(scan_points(s), 0.8e6) for s in range(100)]
    assert coverage(fits, "photon_fwhm", 2.8e6) >= 0.95


def test_hole_scan_noiseless_exact_and_deconvolves():
    pts = scan_points(0)
    pts[:, 1] = 1000 * spectral_hole_scan(2.8e6, 0.8e6, pts[:, 0])
    f = fit_hole_scan(pts, 0.8e6)
    assert f.converged
    assert f["photon_fwhm"] == pytest.approx(2.8e6, rel=1e-8)
    assert f["photon_fwhm"] < raw_fwhm(pts[:, 0], pts[:, 1])


def test_hole_scan_needs_five_points():
    with pytest.raises(ValueError):
        fit_hole_scan(scan_points(0)[:4], 0.8e6)


# prediction ----------------------------------------------------------------------------

def converged_fit(eta0=ETA0, gamma=20e3):
    return FitResult("gaussian_decay", {"eta_0": eta0, "gamma_inh": gamma},
                     {"eta_0": 0.0, "gamma_inh": 0.0}, np.zeros((2, 2)), 0.0, 8, True)


def test_prediction_reference_point():
    p = predict_g2_vs_storage(converged_fit(), 0.209, 1.9e-3, [6e-6])
    assert p.g2[0] == pytest.approx(4.96, abs=0.01)
    assert p.g2[0] == pytest.approx(5.0, abs=0.3)


def test_prediction_limits():
    fit = converged_fit()
    assert np.all(predict_g2_vs_storage(fit, 0.209, math.inf, T_GRID).g2 == 1.0)
    zero = predict_g2_vs_storage(fit, 0.209, 0.0, T_GRID)
    assert zero.unbounded and np.all(np.isinf(zero.g2))
    bad = converged_fit()
    bad.converged = False
    with pytest.raises(ValueError):
        predict_g2_vs_storage(bad, 0.209, 1.9e-3, T_GRID)


def test_prediction_above_threshold_at_longest_storage():
    threshold = math.sqrt(1.0 * 1.32)
    p = predict_g2_vs_storage(converged_fit(), 0.209, 1.9e-3, [32.3e-6 - 7.3e-6])
    assert p.g2[0] > threshold


def test_storage_time_at_threshold_inverts_prediction():
    fit = converged_fit()
    t = storage_time_at_threshold(fit, 0.209, 1.9e-3, 1.5)
    assert predict_g2_vs_storage(fit, 0.209, 1.9e-3, [t]).g2[0] == pytest.approx(1.5)
    assert math.isnan(storage_time_at_threshold(fit, 0.209, 1.9e-3, 100.0))


@given(st.floats(1e-3, 0.2), st.floats(1e3, 1e5), st.floats(0.0, 1.0), st.floats(1e-5, 1.0))
def test_prediction_monotone_and_bounded(eta0, gamma, eta_h, floor):
    g = predict_g2_vs_storage(converged_fit(eta0, gamma), eta_h, floor, np.linspace(0, 1e-4, 50)).g2
    assert np.all(np.diff(g) <= 1e-12)
    assert np.all(g >= 1.0)


# estimator wrappers -------------------------------------------------------------------

def test_gaussian_decay_regressor():
    pts = decay_points(2)
    est = GaussianDecayRegressor().fit(pts[:, :1], pts[:, 1], pts[:, 2])
    assert est.gamma_inh_ == pytest.approx(20e3, rel=0.3)
    assert est.predict(T_GRID[:, None]).shape == (8,)
    assert clone(est).get_params() == {}


def test_double_exponential_peak_estimator():
    h = peak_histogram(5)
    est = DoubleExponentialPeak(bin_width=10e-9).fit(h.centers, h.counts)
    assert est.get_params() == {"bin_width": 10e-9}
    assert est.predict(h.centers).shape == h.counts.shape
    with pytest.raises(FitError):
        DoubleExponentialPeak().fit(h.centers, np.full(len(h.centers), 50))


def test_hole_scan_regressor():
    pts = scan_points(6)
    est = HoleScanRegressor(hole_width=0.8e6).fit(pts[:, 0], pts[:, 1], pts[:, 2])
    assert est.photon_fwhm_ == pytest.approx(2.8e6, rel=0.1)
    assert np.argmax(est.predict(pts[:, 0])) == 16
