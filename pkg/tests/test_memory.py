import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from afcsim.memory import (AomResponse, CombDesign, DegenerateCombError, InconsistentMeasurementError,
                           MemoryEfficiency, SpectralWindow, afc_internal_efficiency,
                           comb_preparation_waveform, comb_spectrum, efficiency_decomposition,
                           filtered_correlation_time, optimal_finesse, pulse_spacing,
                           spectral_hole_scan, spectral_overlap, spin_dephasing_efficiency,
                           spin_wave_efficiency, total_afc_efficiency, transfer_efficiency_from_echoes)
from afcsim.source import correlation_time_from_bandwidth

REF = CombDesign(od=3.5, d0=0.27, finesse=3.8)


def eta_int_oracle(f, od, d0):
    d = od / f
    return d**2 * math.exp(-7 / f**2) * math.exp(-d) * math.exp(-d0)


# efficiencies ------------------------------------------------------------------

def test_internal_efficiency_reference_comb():
    assert afc_internal_efficiency(REF) == pytest.approx(0.15877, abs=5e-5)
    assert afc_internal_efficiency(REF) == pytest.approx(eta_int_oracle(3.8, 3.5, 0.27), rel=1e-14)


def test_total_efficiency_reference():
    assert total_afc_efficiency(REF, 0.70) == pytest.approx(0.113, abs=0.014)
    assert total_afc_efficiency(REF, 0.0) == 0.0
    assert total_afc_efficiency(REF, 1.0) == afc_internal_efficiency(REF)
    with pytest.raises(ValueError):
        total_afc_efficiency(REF, 1.1)


def test_decomposition_reference_values():
    e = efficiency_decomposition(REF, 0.70, 0.725)
    assert e.eta_abs == pytest.approx(0.43, abs=0.02)
    assert e.eta_reph == pytest.approx(0.34, abs=0.02)
    assert e.eta_w == pytest.approx(0.31, abs=0.02)
    assert e.eta_ro == pytest.approx(0.24, abs=0.02)


@given(st.floats(1.0, 10.0), st.floats(0.1, 20.0), st.floats(0.0, 2.0), st.floats(0.01, 1.0),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_decomposition_recomposes(f, od, d0, bw, t, c):
    e = efficiency_decomposition(CombDesign(od=od, d0=d0, finesse=f), bw, t, c)
    assert e.eta_abs * e.eta_reph * e.eta_loss == pytest.approx(total_afc_efficiency(
        CombDesign(od=od, d0=d0, finesse=f), bw), abs=1e-9)
    assert e.eta_sw == pytest.approx(e.eta_afc * t * t * c, abs=1e-12)


def test_decomposition_full_absorption_limit():
    e = efficiency_decomposition(CombDesign(od=1e4, d0=0.0, finesse=1.0), 0.7, 0.7)
    assert e.eta_abs == pytest.approx(0.7, rel=1e-12)


def test_decomposition_degenerate():
    with pytest.raises(DegenerateCombError):
        efficiency_decomposition(REF, 0.0, 0.7)


def test_memory_efficiency_invariants():
    e = efficiency_decomposition(REF, 0.7, 0.725)
    d = e.to_dict()
    d["eta_afc"] += 0.01
    with pytest.raises(ValueError):
        MemoryEfficiency(**d)


def test_optimal_finesse_against_grid():
    rng = np.random.default_rng(0)
    grid = np.arange(1.0, 20.0 + 5e-4, 1e-3)
    for od, d0 in zip(rng.uniform(0.5, 15, 20), rng.uniform(0, 1, 20)):
        d = od / grid
        vals = d * d * np.exp(-7 / grid**2) * np.exp(-d) * np.exp(-d0)
        assert optimal_finesse(od, d0) == pytest.approx(grid[np.argmax(vals)], abs=2e-3)


def test_optimal_finesse_d0_independent_and_dominant():
    f = optimal_finesse(3.5, 0.0)
    assert optimal_finesse(3.5, 0.9) == pytest.approx(f, abs=1e-4)
    assert eta_int_oracle(f, 3.5, 0.27) >= eta_int_oracle(3.8, 3.5, 0.27)
    with pytest.raises(ValueError):
        optimal_finesse(0.0)


def test_dephasing_examples():
    assert spin_dephasing_efficiency(0.0, 20e3) == 1.0
    assert spin_dephasing_efficiency(6e-6, 23e3) == pytest.approx(0.873, abs=5e-4)
    assert spin_dephasing_efficiency(6e-6, 20e3) == pytest.approx(0.9026, abs=5e-4)


@given(st.floats(1e-7, 1e-4), st.floats(1e-7, 1e-4), st.floats(1e3, 1e5), st.floats(1e3, 1e5))
def test_dephasing_strictly_decreasing(t1, t2, g1, g2):
    if t1 < t2 and spin_dephasing_efficiency(t1, g1) > 0:
        assert spin_dephasing_efficiency(t2, g1) < spin_dephasing_efficiency(t1, g1)
    if g1 < g2 and spin_dephasing_efficiency(t1, g1) > 0:
        assert spin_dephasing_efficiency(t1, g2) < spin_dephasing_efficiency(t1, g1)


def test_spin_wave_efficiency_examples():
    assert spin_wave_efficiency(0.113, 0.725, 0.873) == pytest.approx(0.052, abs=6e-4)
    assert spin_wave_efficiency(0.113, 0.0, 0.9) == 0.0
    assert spin_wave_efficiency(0.113, 0.725, 1.0) == pytest.approx(0.113 * 0.725**2)


def test_transfer_efficiency():
    assert transfer_efficiency_from_echoes(0.275 * 0.11, 0.11) == pytest.approx(0.725)
    assert transfer_efficiency_from_echoes(0.11, 0.11) == 0.0
    assert transfer_efficiency_from_echoes(0.0, 0.11) == 1.0
    with pytest.raises(InconsistentMeasurementError):
        transfer_efficiency_from_echoes(0.12, 0.11)


# spectral windows ---------------------------------------------------------------

def test_overlap_oracle_rectangle():
    # closed form for a Lorentzian through a rectangle
    for w in (1e6, 4e6, 10e6):
        expected = 2 / math.pi * math.atan(w / 2.8e6)
        assert spectral_overlap(2.8e6, SpectralWindow(w)) == pytest.approx(expected, rel=1e-6)


def test_overlap_limits():
    assert spectral_overlap(2.8e6, SpectralWindow(math.inf)) == 1.0
    assert spectral_overlap(2.8e6, SpectralWindow(0.0)) == 0.0


@pytest.mark.xfail(strict=True, reason="a 4 MHz rectangular envelope accepts 61 % of a 2.8 MHz "
                   "Lorentzian; 70 % needs about 5.5 MHz, so the measured 0.70 is a config input")
def test_overlap_reference_envelope_near_seventy_percent():
    assert spectral_overlap(2.8e6, SpectralWindow(4e6)) == pytest.approx(0.70, abs=0.05)


def test_overlap_raised_cosine_by_quadrature():
    win = SpectralWindow(4e6, edge=1e6)
    f = lambda nu: (0.5 * 2.8e6 / math.pi) / ((0.5 * 2.8e6) ** 2 + nu**2) * float(win.acceptance(nu))
    oracle = 2 * integrate.quad(f, 0, 1.5e6)[0] + 2 * integrate.quad(f, 1.5e6, 2.5e6)[0]
    assert spectral_overlap(2.8e6, win) == pytest.approx(oracle, rel=1e-6)


@pytest.mark.parametrize("w", [0.5e6, 4e6, 30e6])
def test_overlap_gaussian_by_quadrature(w):
    win = SpectralWindow(w, "gaussian")
    f = lambda nu: (0.5 * 2.8e6 / math.pi) / ((0.5 * 2.8e6) ** 2 + nu**2) * float(win.acceptance(nu))
    oracle = 2 * integrate.quad(f, 0, 10 * w, points=[w, 1.4e6], limit=200, epsabs=0)[0]
    assert spectral_overlap(2.8e6, win) == pytest.approx(oracle, rel=1e-6)


@given(st.floats(1e4, 1e8), st.floats(1e4, 1e8), st.floats(0, 1e8), st.sampled_from(["rect", "gaussian"]))
def test_overlap_monotone_in_width(bw, w, dw, shape):
    a = spectral_overlap(bw, SpectralWindow(w, shape))
    b = spectral_overlap(bw, SpectralWindow(w + dw, shape))
    assert 0 <= a <= b + 1e-7 <= 1 + 1e-7


def test_hole_scan_shape():
    d = np.linspace(-10e6, 10e6, 401)
    y = spectral_hole_scan(2.8e6, 0.8e6, d)
    assert np.argmax(y) == 200 and y[200] == pytest.approx(1.0)
    assert np.allclose(y, y[::-1])
    # narrow hole recovers the Lorentzian profile
    narrow = spectral_hole_scan(2.8e6, 1.0, d)
    lor = 1 / (1 + (2 * d / 2.8e6) ** 2)
    assert np.max(np.abs(narrow - lor)) < 1e-6


def test_hole_scan_against_numeric_convolution():
    nu = np.linspace(-60e6, 60e6, 240_001)
    lor = 1 / (1 + (2 * nu / 2.8e6) ** 2)
    kernel = (np.abs(nu) <= 0.4e6).astype(float)
    conv = np.convolve(lor, kernel, mode="same")
    conv /= conv.max()
    d = np.array([0.0, 1e6, 2e6, 5e6])
    idx = np.searchsorted(nu, d)
    assert np.allclose(spectral_hole_scan(2.8e6, 0.8e6, d), conv[idx], atol=2e-4)
    half = nu[conv >= 0.5]
    raw = half[-1] - half[0]
    assert raw > 2.8e6


def test_filtered_correlation_time_limits():
    assert filtered_correlation_time(2.8e6, SpectralWindow(math.inf)) == correlation_time_from_bandwidth(2.8e6)
    tau = filtered_correlation_time(2.8e6, SpectralWindow(4e6))
    assert tau > correlation_time_from_bandwidth(2.8e6)


def test_filtered_correlation_time_numeric_oracle():
    # brute-force FFT of the filtered Lorentzian spectrum
    n, df = 2**22, 250.0
    nu = (np.arange(n) - n // 2) * df
    spec = 1 / (1 + (2 * nu / 2.8e6) ** 2) * (np.abs(nu) <= 2e6)
    g1 = np.abs(np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(spec))))
    t = (np.arange(n) - n // 2) / (n * df)
    prof = (g1 / g1.max()) ** 2
    above = t[prof >= 0.5]
    oracle = above[-1] - above[0]
    dt = 1 / (n * df)
    assert filtered_correlation_time(2.8e6, SpectralWindow(4e6)) == pytest.approx(oracle, abs=2 * dt)


def test_filtered_correlation_time_gaussian_window_narrows_spectrum():
    narrow = filtered_correlation_time(2.8e6, SpectralWindow(2e6, "gaussian"))
    wide = filtered_correlation_time(2.8e6, SpectralWindow(20e6, "gaussian"))
    assert narrow > wide > correlation_time_from_bandwidth(2.8e6) * 0.999


@pytest.mark.xfail(strict=True, reason="the 4 MHz envelope stretches 78.8 ns to about 265 ns, "
                   "outside the +-30 % band around the measured 147 ns")
def test_filtered_correlation_time_reference_band():
    assert filtered_correlation_time(2.8e6, SpectralWindow(4e6)) == pytest.approx(147e-9, rel=0.3)


# waveform synthesis -------------------------------------------------------------

def test_waveform_pulse_spacing_equals_storage_time():
    w = comb_preparation_waveform(REF, truncation_window=100e-6)
    assert pulse_spacing(w) == pytest.approx(7.3e-6, abs=w.dt)
    assert not w.warnings


def test_waveform_round_trip_untruncated():
    w = comb_preparation_waveform(REF, truncation_window=None)
    err = np.linalg.norm(w.spectrum() - w.target) / np.linalg.norm(w.target)
    assert err < 1e-6


def test_waveform_parseval():
    w = comb_preparation_waveform(REF, truncation_window=None)
    e_time = np.sum(np.abs(w.field) ** 2) * len(w.freq)
    e_freq = np.sum(np.abs(w.target) ** 2)
    assert e_time == pytest.approx(e_freq, rel=1e-9)


def test_truncation_error_decreases_with_window():
    errs = []
    for tw in (20e-6, 50e-6, 100e-6, 300e-6, 1e-3):
        w = comb_preparation_waveform(REF, truncation_window=tw, freq_step=250.0)
        errs.append(np.linalg.norm(w.spectrum() - w.target) / np.linalg.norm(w.target))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_single_tooth_gives_single_pulse():
    one = CombDesign(finesse=1.0, periodicity=1e6, total_width=1e6)
    assert one.n_teeth == 1
    w = comb_preparation_waveform(one, truncation_window=None)
    assert math.isnan(pulse_spacing(w))


def test_short_truncation_warns_and_range_checked():
    w = comb_preparation_waveform(REF, truncation_window=12e-6)
    assert w.warnings
    with pytest.raises(ValueError):
        comb_preparation_waveform(REF, truncation_window=5e-6)


def test_aom_predistortion():
    aom = AomResponse(np.linspace(0, 1, 11), np.linspace(0, 1, 11) ** 2)
    w = comb_preparation_waveform(REF, truncation_window=50e-6, nonlinearity=aom)
    amp = np.abs(w.field) / np.abs(w.field).max()
    assert np.allclose(aom.forward(np.abs(w.drive)), amp, atol=0.01)
    with pytest.raises(ValueError):
        AomResponse([0, 1], [1, 0])


def test_comb_spectrum_teeth():
    f = np.linspace(-2e6, 2e6, 40_001)
    s = comb_spectrum(REF, f)
    assert s.max() == REF.od
    assert REF.n_teeth == math.floor(4e6 * 7.3e-6)


def test_comb_design_validation():
    with pytest.raises(ValueError):
        CombDesign(finesse=0.5)
    with pytest.raises(ValueError):
        CombDesign(peak_shape="lorentz")
