"""Coincidence statistics over timestamp streams.

Normalised correlations are trial based: coincidences at a given delay within
the same trial are divided by the mean coincidences at the same delay shifted
by whole trial periods. Uncertainties treat every count as an independent
Poisson variable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .source import decay_rate
from .streams import TimestampStream

PS = 1e12


class InvalidInputError(ValueError):
    pass


def _ps(seconds: float) -> int:
    return int(round(seconds * PS))


@dataclass
class CoincidenceHistogram:
    bin_width: float  # s
    range: tuple  # (start, stop) in s
    counts: np.ndarray
    n_starts: int
    empty: bool = False

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    @property
    def edges(self) -> np.ndarray:
        return self.range[0] + self.bin_width * np.arange(len(self.counts) + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    def to_csv(self) -> str:
        rows = ["delay_ns,counts"]
        rows += [f"{c * 1e9:.3f},{n}" for c, n in zip(self.centers, self.counts)]
        return "\n".join(rows) + "\n"


@dataclass
class G2Estimate:
    value: float
    sigma: float
    window: float
    n_coincidences: int
    n_accidental: int
    n_accidental_trials: int
    n_starts: int = 0
    unbounded: bool = False
    lower_bound: float | None = None

    def consistent_with(self, target: float, n_sigma: float) -> bool:
        return abs(self.value - target) <= n_sigma * self.sigma

    def to_dict(self) -> dict:
        d = asdict(self)
        if not math.isfinite(d["value"]):
            d["value"] = None
        return d


@dataclass
class CSResult:
    r: float
    sigma_r: float
    confidence: float
    violated: bool

    def to_dict(self) -> dict:
        return asdict(self)


def count_pairs(start_ps: np.ndarray, stop_ps: np.ndarray, lo_ps: int, hi_ps: int) -> int:
    """Number of (start, stop) pairs with ``lo <= stop - start < hi``; ``stop_ps`` must be sorted."""
    if len(start_ps) == 0 or len(stop_ps) == 0:
        return 0
    hi = np.searchsorted(stop_ps, start_ps + hi_ps, side="left")
    lo = np.searchsorted(stop_ps, start_ps + lo_ps, side="left")
    return int(np.sum(hi - lo))


def pair_delays(start_ps: np.ndarray, stop_ps: np.ndarray, lo_ps: int, hi_ps: int,
                exclude_self: bool = False) -> np.ndarray:
    """All delays ``stop - start`` in ``[lo, hi)``; every stop pairs with every start."""
    if len(start_ps) == 0 or len(stop_ps) == 0:
        return np.zeros(0, dtype=np.int64)
    first = np.searchsorted(stop_ps, start_ps + lo_ps, side="left")
    last = np.searchsorted(stop_ps, start_ps + hi_ps, side="left")
    n = last - first
    owner = np.repeat(np.arange(len(start_ps)), n)
    offsets = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    idx = np.repeat(first, n) + offsets
    delays = stop_ps[idx] - start_ps[owner]
    if exclude_self:
        delays = delays[idx != owner]
    return delays


def build_histogram(starts: TimestampStream, stops: TimestampStream, bin_width: float,
                    range: tuple, exclude_self: bool | None = None) -> CoincidenceHistogram:
    """Start-stop delay histogram over ``range`` (s), binned at ``bin_width`` (s).

    When ``starts`` and ``stops`` are the same stream each event's pairing with
    itself is dropped.
    """
    lo, hi = _ps(range[0]), _ps(range[1])
    bw = _ps(bin_width)
    if bw <= 0 or hi <= lo:
        raise ValueError("bin_width and range must be positive")
    if (hi - lo) % bw:
        raise ValueError("range must be an integer number of bins")
    nbins = (hi - lo) // bw
    if exclude_self is None:
        exclude_self = starts is stops
    if len(starts) == 0:
        return CoincidenceHistogram(bin_width, tuple(range), np.zeros(nbins, dtype=np.int64), 0, True)
    d = pair_delays(starts.time_ps, stops.time_ps, lo, hi, exclude_self)
    counts = np.bincount((d - lo) // bw, minlength=nbins)[:nbins]
    return CoincidenceHistogram(bin_width, tuple(range), counts, len(starts))


def neighbour_offsets(n: int, neighbors: str = "symmetric") -> list[int]:
    """Trial offsets used for the accidental baseline."""
    if n < 1:
        raise ValueError("at least one accidental trial is required")
    if neighbors == "following":
        return list(np.arange(1, n + 1))
    if neighbors == "symmetric":
        half = n // 2
        offs = [m for m in np.arange(-half, half + 1) if m != 0]
        if n % 2:
            offs.append(half + 1)
        return offs
    raise ValueError("neighbors must be 'symmetric' or 'following'")


def _trial_normalised(starts: TimestampStream, stops: TimestampStream, delay: float,
                      window: float, offsets, trial_period_ps: int | None = None,
                      n_trials: int | None = None) -> G2Estimate:
    period = trial_period_ps or starts.trial_period_ps
    if n_trials is None:
        n_trials = max(starts.n_trials, stops.n_trials)
        if not n_trials:
            top = [s.trial_index.max() for s in (starts, stops) if len(s)]
            n_trials = int(max(top)) + 1 if top else 0
    offsets = [int(m) for m in offsets]
    k = starts.trial_index
    ok = (k + min(min(offsets), 0) >= 0) & (k + max(max(offsets), 0) < n_trials)
    s = starts.time_ps[ok]
    stop = stops.time_ps
    centre = _ps(delay)
    half = _ps(window) // 2
    c0 = count_pairs(s, stop, centre - half, centre + half)
    if starts is stops and -half <= centre < half:
        c0 -= len(s)  # each event paired with itself
    acc = [count_pairs(s, stop, centre + m * period - half, centre + m * period + half)
           for m in offsets]
    total = int(sum(acc))
    n_off = len(offsets)
    if total == 0:
        lb = c0 * n_off  # one accidental count over all neighbour trials
        return G2Estimate(math.inf, math.inf, window, c0, 0, n_off, int(len(s)), True, float(lb))
    mean = total / n_off
    value = c0 / mean
    rel = math.sqrt(1.0 / max(c0, 1) + 1.0 / total)
    sigma = value * rel if c0 > 0 else 1.0 / mean
    return G2Estimate(value, sigma, window, c0, total, n_off, int(len(s)))


def g2_cross(starts: TimestampStream, stops: TimestampStream, peak_delay: float, window: float,
             accidental_trials: int = 20, trial_period: float | None = None,
             neighbors: str = "symmetric") -> G2Estimate:
    """Cross-correlation at ``peak_delay`` (s) integrated over ``window`` (s)."""
    period = _ps(trial_period) if trial_period else None
    return _trial_normalised(starts, stops, peak_delay, window,
                             neighbour_offsets(accidental_trials, neighbors), period)


def g2_auto_hbt(stream_a: TimestampStream, stream_b: TimestampStream, window: float,
                accidental_trials: int = 20, trial_period: float | None = None) -> G2Estimate:
    """Autocorrelation from the two outputs of a beam splitter, around zero delay."""
    period = _ps(trial_period) if trial_period else None
    return _trial_normalised(stream_a, stream_b, 0.0, window,
                             neighbour_offsets(accidental_trials, "symmetric"), period)


def g2_auto_single(stream: TimestampStream, window: float, accidental_trials: int = 20,
                   trial_period: float | None = None) -> G2Estimate:
    """Autocorrelation of one detector's stream, excluding each event's pairing with itself."""
    period = _ps(trial_period) if trial_period else None
    return _trial_normalised(stream, stream, 0.0, window,
                             neighbour_offsets(accidental_trials, "symmetric"), period)


def classical_threshold(g2_auto_signal: float, g2_auto_idler: float) -> float:
    """Largest cross-correlation allowed for classical fields."""
    return math.sqrt(g2_auto_signal * g2_auto_idler)


def cauchy_schwarz(cross: G2Estimate, auto_signal: G2Estimate, auto_idler: G2Estimate) -> CSResult:
    c, s, i = cross.value, auto_signal.value, auto_idler.value
    if s <= 0 or i <= 0:
        raise InvalidInputError("autocorrelations must be positive")
    r = c * c / (s * i)
    rel2 = (2 * cross.sigma / c) ** 2 if c > 0 else 0.0
    rel2 += (auto_signal.sigma / s) ** 2 + (auto_idler.sigma / i) ** 2
    sigma_r = r * math.sqrt(rel2)
    if sigma_r > 0:
        # stays below 1 so that a violation is never reported as certain
        confidence = min(float(norm.cdf((r - 1.0) / sigma_r)), math.nextafter(1.0, 0.0))
    else:
        confidence = 1.0 if r > 1 else (0.5 if r == 1 else 0.0)
    return CSResult(r, sigma_r, confidence, bool(r > 1.0))


def estimate(value: float, sigma: float, window: float = math.nan) -> G2Estimate:
    """A bare estimate, e.g. a literature value, for :func:`cauchy_schwarz`."""
    return G2Estimate(value, sigma, window, 0, 0, 0)


@dataclass
class MultimodeMatrix:
    subwindow: float
    total_storage: float
    entries: list  # entries[i][j]: idler sub-mode i, signal sub-mode j
    separations: np.ndarray  # s, storage time between sub-modes i and j

    @property
    def n_modes(self) -> int:
        return len(self.entries)

    def values(self) -> np.ndarray:
        return np.array([[e.value for e in row] for row in self.entries])

    def sigmas(self) -> np.ndarray:
        return np.array([[e.sigma for e in row] for row in self.entries])

    def diagonal(self) -> list:
        return [self.entries[i][i] for i in range(self.n_modes)]

    def off_diagonal(self) -> list:
        n = self.n_modes
        return [self.entries[i][j] for i in range(n) for j in range(n) if i != j]

    def to_dict(self) -> dict:
        return {
            "subwindow": self.subwindow,
            "total_storage": self.total_storage,
            "separations": self.separations.tolist(),
            "values": [[e.to_dict()["value"] for e in row] for row in self.entries],
            "sigmas": self.sigmas().tolist(),
        }


def mode_capacity(idler_gate: float, window: float) -> int:
    """Number of whole temporal modes of width ``window`` in the idler gate."""
    if not window > 0:
        raise ValueError("window must be positive")
    return int(math.floor(idler_gate / window + 1e-9))


def multimode_matrix(idler: TimestampStream, signal: TimestampStream, subwindow: float,
                     total_storage: float, idler_gate: float, idler_gate_start: float = 0.0,
                     accidental_trials: int = 20, neighbors: str = "symmetric") -> MultimodeMatrix:
    """Cross-correlations between idler sub-modes and signal sub-modes.

    Idler detections are restricted to sub-mode ``i`` of the idler gate and
    correlated with signal detections at delay ``total_storage + (j - i) *
    subwindow`` using a coincidence window equal to ``subwindow``.
    """
    n = mode_capacity(idler_gate, subwindow)
    sub_ps, start_ps = _ps(subwindow), _ps(idler_gate_start)
    entries = []
    seps = np.zeros((n, n))
    for i in range(n):
        herald = idler.within_trial_window(start_ps + i * sub_ps, start_ps + (i + 1) * sub_ps)
        row = []
        for j in range(n):
            seps[i, j] = total_storage + (j - i) * subwindow
            row.append(g2_cross(herald, signal, seps[i, j], subwindow, accidental_trials,
                                neighbors=neighbors))
        entries.append(row)
    return MultimodeMatrix(subwindow, total_storage, entries, seps)


def g2_vs_idler_gate(idler: TimestampStream, signal: TimestampStream, gates, peak_delay: float,
                     window: float, gate_end: float, accidental_trials: int = 20,
                     neighbors: str = "symmetric") -> list:
    """Cross-correlation keeping only heralds in the last ``g`` seconds before ``gate_end``."""
    end = _ps(gate_end)
    out = []
    for g in gates:
        herald = idler.within_trial_window(end - _ps(g), end)
        out.append(g2_cross(herald, signal, peak_delay, window, accidental_trials, neighbors=neighbors))
    return out


def snr_from_histogram(hist: CoincidenceHistogram, peak_delay: float, window: float) -> float:
    """Raw ratio of peak counts in ``window`` to the mean noise in an equal window elsewhere.

    The peak includes its own noise floor, so a histogram without signal gives
    about 1. Returns ``inf`` when no counts lie outside the peak.
    """
    c = hist.centers
    inside = np.abs(c - peak_delay) < 0.5 * window
    outside = ~inside
    if not outside.any():
        raise ValueError("histogram has no bins outside the peak window")
    peak = hist.counts[inside].sum()
    per_bin = hist.counts[outside].mean()
    noise = per_bin * inside.sum()
    if noise == 0:
        return math.inf if peak > 0 else math.nan
    return float(peak / noise)


def noisy_storage_autocorrelation(g2_in: float, snr_unc: float) -> float:
    """Autocorrelation of a signal mixed with unbunched noise at signal-to-noise ``snr_unc``."""
    if g2_in < 1 or snr_unc < 0:
        raise ValueError("g2_in >= 1 and snr_unc >= 0 required")
    if math.isinf(snr_unc):
        return g2_in
    mu_s, mu_n = snr_unc, 1.0
    return (g2_in * mu_s**2 + 2 * mu_s * mu_n + mu_n**2) / (mu_s + mu_n) ** 2


def finite_window_g2(g2_zero_delay: float, window: float, tau_c: float) -> float:
    """Mean of ``1 + (g2(0) - 1) exp(-a|t|)`` over a window centred on zero delay.

    ``a`` makes the bunching kernel a double exponential with FWHM ``tau_c``.
    """
    if not window >= 0 or not tau_c > 0:
        raise ValueError("window >= 0 and tau_c > 0 required")
    if math.isinf(window):
        return 1.0
    x = 0.5 * decay_rate(tau_c) * window
    kernel_mean = 1.0 if x == 0 else -math.expm1(-x) / x
    return 1.0 + (g2_zero_delay - 1.0) * kernel_mean
