"""Cavity-enhanced SPDC pair source.

The heralded photon is treated as a single Lorentzian mode: its coincidence
envelope with the idler is a symmetric double exponential whose FWHM is the
correlation time. Extra spectral modes only enter through the autocorrelation
scaling in :func:`multimode_autocorrelation`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

LN2 = math.log(2.0)


@dataclass(frozen=True)
class BiphotonSpec:
    """Spectral and rate description of the photon-pair source.

    ``pair_rate`` is the rate of pairs whose idler reaches the idler detector;
    ``heralding_efficiency`` is the probability that the partner signal photon
    is present in front of the memory.
    """

    bandwidth_fwhm: float = 2.8e6
    heralding_efficiency: float = 0.209
    pair_rate: float = 1.0e4
    n_spectral_modes: float = 3.9
    signal_wavelength: float = 606e-9
    idler_wavelength: float = 1436e-9
    cavity_fsr: float = 423e6
    pump_power: float = 3.3e-3

    def __post_init__(self):
        if not self.bandwidth_fwhm > 0:
            raise ValueError("bandwidth_fwhm must be positive")
        if not 0.0 <= self.heralding_efficiency <= 1.0:
            raise ValueError("heralding_efficiency must lie in [0, 1]")
        if not self.n_spectral_modes >= 1:
            raise ValueError("n_spectral_modes must be >= 1")
        if self.pair_rate < 0:
            raise ValueError("pair_rate must be non-negative")

    @property
    def correlation_time(self) -> float:
        return correlation_time_from_bandwidth(self.bandwidth_fwhm)


def correlation_time_from_bandwidth(bandwidth_fwhm: float) -> float:
    """FWHM of the coincidence envelope for a Lorentzian line of FWHM ``bandwidth_fwhm`` (Hz)."""
    if not bandwidth_fwhm > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_fwhm!r}")
    if math.isinf(bandwidth_fwhm):
        return 0.0
    return LN2 / (math.pi * bandwidth_fwhm)


def bandwidth_from_correlation_time(tau_c: float) -> float:
    if not tau_c > 0:
        raise ValueError(f"correlation time must be positive, got {tau_c!r}")
    return LN2 / (math.pi * tau_c)


def decay_rate(tau_c: float) -> float:
    """Exponential rate ``a`` such that ``exp(-a|t|)`` has FWHM ``tau_c``."""
    return 2.0 * LN2 / tau_c


def biphoton_temporal_density(t, tau_c: float):
    """Unit-area double-exponential density of the signal-idler delay."""
    if not tau_c > 0:
        raise ValueError("tau_c must be positive")
    a = decay_rate(tau_c)
    return 0.5 * a * np.exp(-a * np.abs(np.asarray(t, dtype=float)))


def sample_delays(n: int, tau_c: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` signal-idler delays (s) from :func:`biphoton_temporal_density`."""
    return rng.laplace(0.0, 1.0 / decay_rate(tau_c), size=n)


def multimode_autocorrelation(g2_single_mode: float, n_modes: float) -> float:
    """Zero-delay autocorrelation of ``n_modes`` equally populated thermal modes."""
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    if g2_single_mode < 1:
        raise ValueError("g2_single_mode must be >= 1")
    if math.isinf(n_modes):
        return 1.0
    return 1.0 + (g2_single_mode - 1.0) / n_modes


def single_mode_from_multimode(g2_multimode: float, n_modes: float) -> float:
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    return 1.0 + (g2_multimode - 1.0) * n_modes


def sample_pair_emissions(spec: BiphotonSpec, duration: float, rng_seed=None):
    """Sample pair emissions over ``duration`` seconds.

    Returns ``(idler_time, signal_time)`` arrays in seconds. Pair creation is a
    homogeneous Poisson process at ``spec.pair_rate``; each signal photon is
    delayed by a draw from the biphoton density and survives to the memory with
    probability ``spec.heralding_efficiency``. Lost signals carry ``nan``.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(rng_seed)
    n = rng.poisson(spec.pair_rate * duration)
    idler = np.sort(rng.uniform(0.0, duration, size=n))
    signal = idler + sample_delays(n, spec.correlation_time, rng)
    lost = rng.random(n) >= spec.heralding_efficiency
    signal[lost] = np.nan
    return idler, signal


def sample_thermal_stream(rate: float, tau_c: float, duration: float, rng_seed=None,
                          dt: float | None = None) -> np.ndarray:
    """Photon arrival times (s) of a single-mode chaotic field.

    The complex field is an Ornstein-Uhlenbeck process with ``|g1(t)|^2`` equal
    to the double-exponential kernel of FWHM ``tau_c``, so the detected stream
    shows ``g2(0) = 2`` bunching. Arrivals are a doubly stochastic Poisson
    process on a grid of step ``dt`` (default ``tau_c / 20``).
    """
    if rate < 0 or not tau_c > 0 or not duration > 0:
        raise ValueError("rate >= 0, tau_c > 0 and duration > 0 required")
    rng = np.random.default_rng(rng_seed)
    dt = tau_c / 20.0 if dt is None else dt
    n = int(math.ceil(duration / dt))
    # field coherence |g1| = exp(-gamma |t|) with 2 gamma = decay_rate(tau_c)
    rho = math.exp(-0.5 * decay_rate(tau_c) * dt)
    noise = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * math.sqrt((1 - rho**2) / 2)
    noise[0] = (rng.standard_normal() + 1j * rng.standard_normal()) / math.sqrt(2)
    field = sps.lfilter([1.0], [1.0, -rho], noise)
    intensity = np.abs(field) ** 2
    counts = rng.poisson(rate * dt * intensity)
    bins = np.repeat(np.arange(n), counts)
    return np.sort((bins + rng.random(len(bins))) * dt)
