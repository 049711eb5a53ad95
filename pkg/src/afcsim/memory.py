"""Atomic frequency comb memory: design, efficiency budget and spectral filtering."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from .source import LN2, correlation_time_from_bandwidth

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class DegenerateCombError(ValueError):
    """The comb absorbs nothing, so rephasing efficiency is undefined."""


class InconsistentMeasurementError(ValueError):
    pass


@dataclass(frozen=True)
class CombDesign:
    """AFC geometry. ``periodicity`` is the tooth spacing in Hz (storage time ``1/periodicity``)."""

    od: float = 3.5
    d0: float = 0.27
    finesse: float = 3.8
    periodicity: float = 1.0 / 7.3e-6
    total_width: float = 4.0e6
    peak_shape: str = "square"

    def __post_init__(self):
        if self.finesse < 1:
            raise ValueError("finesse must be >= 1")
        if not self.od > 0:
            raise ValueError("od must be positive")
        if self.d0 < 0:
            raise ValueError("d0 must be non-negative")
        if not self.periodicity > 0 or not self.total_width > 0:
            raise ValueError("periodicity and total_width must be positive")
        if self.peak_shape not in ("square", "gaussian"):
            raise ValueError("peak_shape must be 'square' or 'gaussian'")

    @classmethod
    def from_storage_time(cls, storage_time: float, **kwargs) -> "CombDesign":
        return cls(periodicity=1.0 / storage_time, **kwargs)

    @property
    def storage_time(self) -> float:
        return 1.0 / self.periodicity

    @property
    def peak_fwhm(self) -> float:
        return self.periodicity / self.finesse

    @property
    def effective_od(self) -> float:
        return self.od / self.finesse

    @property
    def n_teeth(self) -> int:
        return max(1, int(math.floor(self.total_width / self.periodicity + 1e-9)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(peak_fwhm=self.peak_fwhm, storage_time=self.storage_time,
                 effective_od=self.effective_od, n_teeth=self.n_teeth)
        return d


@dataclass(frozen=True)
class MemoryEfficiency:
    eta_int: float
    eta_bw: float
    eta_afc: float
    eta_abs: float
    eta_reph: float
    eta_loss: float
    eta_t: float
    eta_c: float
    eta_w: float
    eta_ro: float
    eta_sw: float

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not -1e-12 <= value <= 1 + 1e-12:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if abs(self.eta_afc - self.eta_abs * self.eta_reph * self.eta_loss) > 1e-9:
            raise ValueError("eta_afc != eta_abs * eta_reph * eta_loss")
        if abs(self.eta_sw - self.eta_afc * self.eta_t**2 * self.eta_c) > 1e-9:
            raise ValueError("eta_sw != eta_afc * eta_t^2 * eta_c")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SpinParams:
    t_s: float = 6e-6
    gamma_inh: float = 20e3
    afc_delay: float = 7.3e-6

    def __post_init__(self):
        if self.t_s < 0:
            raise ValueError("t_s must be non-negative")
        if not self.gamma_inh > 0:
            raise ValueError("gamma_inh must be positive")

    @property
    def total_storage(self) -> float:
        return self.afc_delay + self.t_s


def _internal_efficiency(finesse: float, od: float, d0: float) -> float:
    d = od / finesse
    return d * d * math.exp(-7.0 / finesse**2) * math.exp(-d) * math.exp(-d0)


def afc_internal_efficiency(comb: CombDesign) -> float:
    """Echo efficiency of a comb with Gaussian teeth, before bandwidth mismatch."""
    eta = _internal_efficiency(comb.finesse, comb.od, comb.d0)
    assert 0.0 <= eta <= 1.0, eta
    return eta


def total_afc_efficiency(comb: CombDesign, eta_bw: float) -> float:
    if not 0.0 <= eta_bw <= 1.0:
        raise ValueError("eta_bw must lie in [0, 1]")
    return afc_internal_efficiency(comb) * eta_bw


def spin_dephasing_efficiency(t_s, gamma_inh: float):
    """Gaussian spin dephasing factor for storage ``t_s`` (s) and inhomogeneous FWHM ``gamma_inh`` (Hz)."""
    if not gamma_inh > 0:
        raise ValueError("gamma_inh must be positive")
    t_s = np.asarray(t_s, dtype=float)
    if np.any(t_s < 0):
        raise ValueError("t_s must be non-negative")
    out = np.exp(-((t_s * gamma_inh) ** 2) * math.pi**2 / (2.0 * LN2))
    return float(out) if out.ndim == 0 else out


def spin_wave_efficiency(eta_afc: float, eta_t: float, eta_c: float) -> float:
    for name, v in (("eta_afc", eta_afc), ("eta_t", eta_t), ("eta_c", eta_c)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    return eta_afc * eta_t**2 * eta_c


def transfer_efficiency_from_echoes(eta_afc_with_cp: float, eta_afc: float) -> float:
    """Control-pulse transfer efficiency from the AFC echo suppressed by an early control pulse."""
    if not 0.0 < eta_afc <= 1.0:
        raise ValueError("eta_afc must lie in (0, 1]")
    if eta_afc_with_cp < 0:
        raise ValueError("eta_afc_with_cp must be non-negative")
    if eta_afc_with_cp > eta_afc:
        raise InconsistentMeasurementError(
            "echo with control pulse exceeds the bare AFC echo")
    return 1.0 - eta_afc_with_cp / eta_afc


def efficiency_decomposition(comb: CombDesign, eta_bw: float, eta_t: float,
                             eta_c: float = 1.0) -> MemoryEfficiency:
    eta_int = afc_internal_efficiency(comb)
    eta_afc = total_afc_efficiency(comb, eta_bw)
    eta_abs = (1.0 - math.exp(-comb.effective_od)) * eta_bw
    eta_loss = math.exp(-comb.d0)
    if eta_abs * eta_loss == 0.0:
        raise DegenerateCombError("comb absorption is zero; rephasing efficiency undefined")
    eta_reph = eta_afc / (eta_abs * eta_loss)
    return MemoryEfficiency(
        eta_int=eta_int,
        eta_bw=eta_bw,
        eta_afc=eta_afc,
        eta_abs=eta_abs,
        eta_reph=eta_reph,
        eta_loss=eta_loss,
        eta_t=eta_t,
        eta_c=eta_c,
        eta_w=eta_abs * eta_t,
        eta_ro=eta_t * eta_reph,
        eta_sw=spin_wave_efficiency(eta_afc, eta_t, eta_c),
    )


def golden_section_max(func, lo: float, hi: float, tol: float = 1e-4) -> float:
    """Maximiser of a unimodal ``func`` on ``[lo, hi]`` to absolute tolerance ``tol``."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = func(d)
    return 0.5 * (a + b)


def optimal_finesse(od: float, d0: float = 0.0, tol: float = 1e-4) -> float:
    """Finesse maximising the internal echo efficiency for optical depth ``od``."""
    if not od > 0:
        raise ValueError("od must be positive")
    hi = max(20.0, 2.0 * od)
    return golden_section_max(lambda f: _internal_efficiency(f, od, d0), 1.0, hi, tol)


# spectral windows -------------------------------------------------------------

@dataclass(frozen=True)
class SpectralWindow:
    """Acceptance ``E(nu)`` in [0, 1] of a spectral filter centred on the photon.

    ``shape`` is ``"rect"`` (optionally with raised-cosine edges of total
    width ``edge`` Hz) or ``"gaussian"`` (``width`` is then the FWHM).
    """

    width: float = 4.0e6
    shape: str = "rect"
    edge: float = 0.0

    def __post_init__(self):
        if self.width < 0 or self.edge < 0:
            raise ValueError("width and edge must be non-negative")
        if self.shape not in ("rect", "gaussian"):
            raise ValueError("shape must be 'rect' or 'gaussian'")

    @property
    def is_unbounded(self) -> bool:
        return math.isinf(self.width)

    @property
    def support(self) -> float:
        """Half-width beyond which the acceptance is (numerically) zero."""
        if self.shape == "gaussian":
            return math.inf
        return 0.5 * self.width + 0.5 * self.edge

    def acceptance(self, nu):
        nu = np.abs(np.asarray(nu, dtype=float))
        if self.is_unbounded:
            return np.ones_like(nu)
        if self.shape == "gaussian":
            if self.width == 0:
                return np.zeros_like(nu)
            return np.exp(-4.0 * LN2 * nu**2 / self.width**2)
        half = 0.5 * self.width
        if self.edge == 0:
            return (nu <= half).astype(float)
        # raised-cosine roll-off centred on the nominal edge
        lo, hi = half - 0.5 * self.edge, half + 0.5 * self.edge
        x = np.clip((nu - lo) / self.edge, 0.0, 1.0)
        out = 0.5 * (1.0 + np.cos(math.pi * x))
        return np.where(nu < lo, 1.0, np.where(nu > hi, 0.0, out))


def lorentzian(nu, fwhm: float):
    """Unit-area Lorentzian line shape."""
    g = 0.5 * fwhm
    return (g / math.pi) / (g * g + np.asarray(nu, dtype=float) ** 2)


def spectral_overlap(photon_fwhm: float, window: SpectralWindow) -> float:
    """Fraction of a Lorentzian photon spectrum accepted by ``window``."""
    if not photon_fwhm > 0:
        raise ValueError("photon_fwhm must be positive")
    if window.is_unbounded:
        return 1.0
    if window.width == 0:
        return 0.0

    def f(nu):
        return float(lorentzian(nu, photon_fwhm) * window.acceptance(nu))

    if window.shape == "gaussian":
        # Lorentzian against a Gaussian: the Voigt integral at zero offset
        sigma = window.width / (2.0 * math.sqrt(2.0 * LN2))
        return float(special.erfcx(0.5 * photon_fwhm / (sigma * math.sqrt(2.0))))
    hi = window.support
    pts = [p for p in (0.5 * window.width - 0.5 * window.edge, 0.5 * photon_fwhm) if 0 < p < hi]
    val, _ = integrate.quad(f, 0.0, hi, points=pts or None, epsabs=0.0, epsrel=1e-10, limit=400)
    return min(1.0, 2.0 * val)


def spectral_hole_scan(photon_fwhm: float, hole_width: float, detunings):
    """Transmitted fraction of a Lorentzian through a rectangular hole, normalised to its peak."""
    if not photon_fwhm > 0 or not hole_width > 0:
        raise ValueError("photon_fwhm and hole_width must be positive")
    d = np.asarray(detunings, dtype=float)
    g = 0.5 * photon_fwhm

    def through(delta):
        a = (delta + 0.5 * hole_width) / g
        b = (delta - 0.5 * hole_width) / g
        return np.arctan2(a - b, 1.0 + a * b)

    return through(d) / through(0.0)


def filtered_correlation_time(input_fwhm: float, window: SpectralWindow) -> float:
    """Coincidence-envelope FWHM (s) of a Lorentzian photon after spectral filtering.

    The field correlation is the Fourier transform of the filtered Lorentzian
    spectrum; the returned width is the FWHM of its squared modulus.
    """
    if not input_fwhm > 0 or not window.width > 0:
        raise ValueError("input_fwhm and window width must be positive")
    tau0 = correlation_time_from_bandwidth(input_fwhm)
    if window.is_unbounded:
        return tau0

    g = 0.5 * input_fwhm
    rejected = lambda nu: float(lorentzian(nu, input_fwhm) * (1.0 - window.acceptance(nu)))

    def g1(t):
        # full Lorentzian transform minus the part the window rejects
        full = 0.5 * math.exp(-2.0 * math.pi * g * t)
        if window.shape == "gaussian":
            # acceptance is below 1e-10 past three FWHM
            accepted = lambda nu: float(lorentzian(nu, input_fwhm) * window.acceptance(nu))
            if t == 0:
                val, _ = integrate.quad(accepted, 0.0, 3 * window.width, epsrel=1e-11, limit=400)
            else:
                val, _ = integrate.quad(accepted, 0.0, 3 * window.width, weight="cos",
                                        wvar=2 * math.pi * t, limit=400)
            return val
        lo = 0.5 * (window.width - window.edge)
        hi = window.support
        cut = 0.0
        if hi > lo:
            if t == 0:
                cut, _ = integrate.quad(rejected, lo, hi, epsrel=1e-11, limit=400)
            else:
                cut, _ = integrate.quad(rejected, lo, hi, weight="cos", wvar=2 * math.pi * t, limit=400)
        if t == 0:
            cut += 0.5 - math.atan(hi / g) / math.pi
        else:
            tail, _ = integrate.quad(lambda nu: float(lorentzian(nu, input_fwhm)), hi, math.inf,
                                     weight="cos", wvar=2 * math.pi * t)
            cut += tail
        return full - cut

    g0 = g1(0.0)
    half = lambda t: (g1(t) / g0) ** 2 - 0.5
    t_hi = 0.25 * tau0
    while half(t_hi) > 0:
        t_hi *= 1.5
    t_lo = t_hi / 1.5 if t_hi > 0.25 * tau0 else 0.0
    return 2.0 * optimize.brentq(half, t_lo, t_hi, xtol=1e-15, rtol=1e-12)


# comb preparation waveform ----------------------------------------------------

@dataclass
class AomResponse:
    """Tabulated monotone map from drive amplitude to optical amplitude, both in [0, 1]."""

    drive: np.ndarray
    output: np.ndarray

    def __post_init__(self):
        self.drive = np.asarray(self.drive, dtype=float)
        self.output = np.asarray(self.output, dtype=float)
        if self.drive.shape != self.output.shape or self.drive.ndim != 1 or len(self.drive) < 2:
            raise ValueError("drive and output must be 1-D tables of equal length >= 2")
        if np.any(np.diff(self.drive) <= 0) or np.any(np.diff(self.output) <= 0):
            raise ValueError("AOM response table must be strictly increasing")

    @classmethod
    def identity(cls) -> "AomResponse":
        return cls(np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    def forward(self, drive):
        return np.interp(drive, self.drive, self.output)

    def inverse(self, output):
        return np.interp(output, self.output, self.drive)


@dataclass
class CombWaveform:
    time: np.ndarray  # s, 0 at the principal pulse
    field: np.ndarray  # complex, inverse transform of the target spectrum
    drive: np.ndarray  # complex, peak-normalised and pre-distorted for the AOM
    freq: np.ndarray  # Hz, offset from the comb centre
    target: np.ndarray  # target comb spectrum on ``freq``
    dt: float
    warnings: list = field(default_factory=list)

    def spectrum(self) -> np.ndarray:
        """Forward transform of ``field`` zero-padded onto the full grid."""
        n = len(self.freq)
        full = np.zeros(n, dtype=complex)
        idx = np.rint(self.time / self.dt).astype(int) + n // 2
        full[idx] = self.field
        return np.fft.fftshift(np.fft.fft(np.fft.ifftshift(full)))

    def to_csv(self) -> str:
        lines = ["time_us,amplitude,phase_rad"]
        amp, ph = np.abs(self.drive), np.angle(self.drive)
        lines += [f"{t * 1e6:.6f},{a:.9g},{p:.9g}" for t, a, p in zip(self.time, amp, ph)]
        return "\n".join(lines) + "\n"


def comb_spectrum(comb: CombDesign, freq) -> np.ndarray:
    """Optical depth profile of the comb on ``freq`` (Hz offsets from centre)."""
    freq = np.asarray(freq, dtype=float)
    n = comb.n_teeth
    centres = (np.arange(n) - 0.5 * (n - 1)) * comb.periodicity
    gamma = comb.peak_fwhm
    out = np.zeros_like(freq)
    for c in centres:
        if comb.peak_shape == "square":
            out += (np.abs(freq - c) <= 0.5 * gamma)
        else:
            out += np.exp(-4.0 * LN2 * (freq - c) ** 2 / gamma**2)
    return comb.od * out


def comb_preparation_waveform(comb: CombDesign, truncation_window: float | None = 100e-6,
                              nonlinearity: AomResponse | None = None,
                              sample_rate: float | None = None,
                              freq_step: float | None = None) -> CombWaveform:
    """Pulse train whose spectrum is the target comb.

    ``truncation_window`` keeps the principal part of the inverse transform
    (``None`` keeps everything). The drive amplitude is peak-normalised and
    mapped through the inverse of ``nonlinearity``.
    """
    warnings = []
    if truncation_window is not None:
        if not 10e-6 <= truncation_window <= 1e-3:
            raise ValueError("truncation_window must lie in [10 us, 1 ms]")
        if truncation_window < 2.0 / comb.periodicity:
            warnings.append("truncation window shorter than two comb periods; "
                            "periodicity is unresolvable")
    fs = sample_rate or 8.0 * max(comb.total_width, comb.periodicity)
    span = max(4.0 * (truncation_window or 0.0), 16.0 / comb.periodicity, 20.0 / comb.peak_fwhm)
    df = freq_step or 1.0 / span
    n = int(2 ** math.ceil(math.log2(fs / df)))
    dt = 1.0 / (n * df)
    freq = (np.arange(n) - n // 2) * df
    target = comb_spectrum(comb, freq)
    field_full = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(target)))
    time = (np.arange(n) - n // 2) * dt
    if truncation_window is not None:
        keep = np.abs(time) <= 0.5 * truncation_window
        time, fld = time[keep], field_full[keep]
    else:
        fld = field_full
    peak = np.max(np.abs(fld)) or 1.0
    amp = np.abs(fld) / peak
    response = nonlinearity or AomResponse.identity()
    drive = response.inverse(amp) * np.exp(1j * np.angle(fld))
    return CombWaveform(time=time, field=fld, drive=drive, freq=freq, target=target,
                        dt=dt, warnings=warnings)


def pulse_spacing(waveform: CombWaveform, rel_height: float = 0.5) -> float:
    """Median spacing (s) between local maxima of ``|field|`` above ``rel_height`` of the peak."""
    from scipy.signal import find_peaks

    amp = np.abs(waveform.field)
    idx, _ = find_peaks(amp, height=rel_height * amp.max())
    if len(idx) < 2:
        return math.nan
    return float(np.median(np.diff(waveform.time[idx])))


def comb_report(comb: CombDesign, eff: MemoryEfficiency, **extra) -> dict:
    report = {"comb": comb.to_dict(), "efficiency": eff.to_dict()}
    report.update(extra)
    return report
