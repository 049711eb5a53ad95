"""The standard estimator set applied to one simulated or measured run."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import RunConfig
from .correlation import (CoincidenceHistogram, CSResult, G2Estimate, MultimodeMatrix,
                          build_histogram, cauchy_schwarz, estimate, finite_window_g2,
                          g2_auto_hbt, g2_auto_single, g2_cross, g2_vs_idler_gate, mode_capacity,
                          multimode_matrix, snr_from_histogram)
from .memory import efficiency_decomposition, spin_dephasing_efficiency
from .sequence import run_sequence
from .streams import Channel, StreamFormatError, TimestampStream, merge_streams


@dataclass
class AnalysisResult:
    mode: str
    n_trials: int
    counts: dict
    histogram: CoincidenceHistogram | None = None
    cross: dict = field(default_factory=dict)  # window (s) -> G2Estimate
    auto_signal: dict = field(default_factory=dict)
    auto_idler: dict = field(default_factory=dict)
    cauchy_schwarz: dict = field(default_factory=dict)
    snr: float | None = None
    multimode: MultimodeMatrix | None = None
    n_modes: dict = field(default_factory=dict)
    idler_gate_scan: list = field(default_factory=list)  # (gate, G2Estimate)
    autocorrelation: dict = field(default_factory=dict)  # single-channel runs

    def to_dict(self) -> dict:
        ns = lambda w: f"{w * 1e9:.0f}ns"
        d = {"mode": self.mode, "n_trials": self.n_trials, "counts": self.counts}
        if self.cross:
            d["g2_cross"] = {ns(w): e.to_dict() for w, e in self.cross.items()}
        if self.auto_signal:
            d["g2_auto_signal"] = {ns(w): e.to_dict() for w, e in self.auto_signal.items()}
        if self.auto_idler:
            d["g2_auto_idler_model"] = {ns(w): e.to_dict() for w, e in self.auto_idler.items()}
        if self.cauchy_schwarz:
            d["cauchy_schwarz"] = {ns(w): r.to_dict() for w, r in self.cauchy_schwarz.items()}
        if self.snr is not None:
            d["snr"] = self.snr if math.isfinite(self.snr) else None
        if self.multimode is not None:
            d["multimode"] = self.multimode.to_dict()
        if self.n_modes:
            d["mode_capacity"] = {ns(w): n for w, n in self.n_modes.items()}
        if self.idler_gate_scan:
            d["idler_gate_scan"] = [{"gate_s": g, **e.to_dict()} for g, e in self.idler_gate_scan]
        if self.autocorrelation:
            d["autocorrelation"] = {ch: {ns(w): e.to_dict() for w, e in per.items()}
                                    for ch, per in self.autocorrelation.items()}
        return d


def memory_efficiency(cfg: RunConfig):
    eta_c = spin_dephasing_efficiency(cfg.spin.t_s, cfg.spin.gamma_inh)
    return efficiency_decomposition(cfg.comb, cfg.efficiency.eta_bw, cfg.efficiency.eta_t, eta_c)


def simulate(cfg: RunConfig, threads: int = 1) -> dict:
    """Detector streams for ``cfg`` at ``cfg.seed``."""
    cfg.validate()
    return run_sequence(cfg.sequence, cfg.source, memory_efficiency(cfg), cfg.spin, cfg.noise,
                        cfg.detectors, seed=cfg.seed, threads=threads)


def _signal(streams) -> TimestampStream | None:
    parts = [streams[c] for c in (Channel.SIGNAL_A.value, Channel.SIGNAL_B.value) if c in streams]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else merge_streams(parts, Channel.SIGNAL_A)


def idler_autocorrelation(cfg: RunConfig, window: float) -> G2Estimate:
    """Idler autocorrelation from the thermal single-mode model over ``window``."""
    value = finite_window_g2(2.0, window, cfg.source.correlation_time)
    return estimate(value, cfg.analysis.idler_auto_sigma, window)


def analyze_streams(streams: dict, cfg: RunConfig, mode: str | None = None) -> AnalysisResult:
    """Histogram, g2, Cauchy-Schwarz, SNR and multimode estimates for one run.

    With only one channel present, the result holds just its autocorrelation.
    """
    if not streams:
        raise StreamFormatError("no streams to analyze")
    periods = {s.trial_period_ps for s in streams.values()}
    if len(periods) != 1:
        raise StreamFormatError("streams disagree on the trial period")
    mode = mode or cfg.sequence.mode
    a = cfg.analysis
    seq = cfg.sequence
    n_trials = max(s.n_trials for s in streams.values())
    res = AnalysisResult(mode, n_trials, {k: len(v) for k, v in streams.items()})

    if len(streams) == 1:
        (name, s), = streams.items()
        res.autocorrelation[name] = {w: g2_auto_single(s, w, a.auto_neighbors) for w in a.windows}
        return res

    idler = streams.get(Channel.IDLER.value)
    signal = _signal(streams)
    if idler is None or signal is None:
        raise StreamFormatError("analysis needs an idler and at least one signal channel")

    T = seq.total_storage
    if mode == "unconditional":
        n_acc, neighbors = a.cross_neighbors, "symmetric"
    else:
        n_acc, neighbors = a.semi_neighbors, "following"

    lo = round((T - a.histogram_half_span) / a.bin_width) * a.bin_width
    nbins = round(2 * a.histogram_half_span / a.bin_width)
    res.histogram = build_histogram(idler, signal, a.bin_width, (lo, lo + nbins * a.bin_width))
    res.snr = snr_from_histogram(res.histogram, T, seq.coincidence_window)

    hbt = Channel.SIGNAL_A.value in streams and Channel.SIGNAL_B.value in streams
    for w in a.windows:
        res.cross[w] = g2_cross(idler, signal, T, w, n_acc, neighbors=neighbors)
        res.n_modes[w] = mode_capacity(seq.idler_gate, w)
        if hbt and mode == "unconditional":
            res.auto_signal[w] = g2_auto_hbt(streams[Channel.SIGNAL_A.value],
                                             streams[Channel.SIGNAL_B.value], w, a.auto_neighbors)
            res.auto_idler[w] = idler_autocorrelation(cfg, w)
            c, s_, i = res.cross[w], res.auto_signal[w], res.auto_idler[w]
            if math.isfinite(c.value) and s_.value > 0 and not s_.unbounded:
                res.cauchy_schwarz[w] = cauchy_schwarz(c, s_, i)

    if mode == "unconditional" and seq.idler_gate > 0:
        res.multimode = multimode_matrix(idler, signal, a.multimode_window, T, seq.idler_gate,
                                         0.0, n_acc, neighbors)
        res.n_modes[a.multimode_window] = mode_capacity(seq.idler_gate, a.multimode_window)
        gates = [g for g in a.idler_gates if g <= seq.idler_gate + 1e-15]
        scan = g2_vs_idler_gate(idler, signal, gates, T, seq.coincidence_window, seq.idler_gate,
                                n_acc, neighbors)
        res.idler_gate_scan = list(zip(gates, scan))
    return res
