"""Event-level Monte Carlo of spin-wave storage trials.

Trial ``k`` occupies ``[k * trial_period, (k + 1) * trial_period)``. Inside a
trial the idler gate is ``[0, idler_gate)``, the write pulse arrives when it
closes, and the signal gate ``[signal_gate_start, signal_gate_start +
signal_gate)`` defaults to the idler gate shifted by the total storage time,
so every idler sub-window maps onto a signal sub-window.

In herald-triggered modes the idle wait for a herald is not simulated: each
herald trial is placed on the same periodic grid with the herald at a fixed
intra-trial time, centring its echo in the signal gate.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .memory import MemoryEfficiency, SpinParams, spin_dephasing_efficiency
from .source import LN2, BiphotonSpec, sample_delays, sample_pair_emissions
from .streams import Channel, Flag, TimestampStream

log = logging.getLogger(__name__)

MODES = ("unconditional", "semi_conditional", "conditional")
PS = 1e12
CP2_NOISE_RATIO = 0.86

# trials per unconditional batch and herald groups per conditional batch;
# fixed so results do not depend on the thread count
UNCONDITIONAL_BATCH = 500_000
CONDITIONAL_BATCH = 50_000


class ConfigurationError(ValueError):
    """Inconsistent simulation configuration, rejected before sampling."""


@dataclass(frozen=True)
class StorageSequence:
    mode: str = "unconditional"
    trials_per_prep: int = 500
    n_preps: int = 1
    trial_period: float = 190e-6
    afc_delay: float = 7.3e-6
    spin_time: float = 6e-6
    idler_gate: float = 4.5e-6
    signal_gate: float = 4.5e-6
    signal_gate_start: float | None = None
    coincidence_window: float = 320e-9
    pump_off_duration: float = 30e-6
    follow_up_trials: int = 15
    duty_cycle: float = 0.14
    hbt: bool = True
    echo_capture: float = 0.8
    echo_tau_c: float | None = None
    filter_transmission: float = 1.0

    @property
    def total_storage(self) -> float:
        return self.afc_delay + self.spin_time

    @property
    def gate_start(self) -> float:
        return self.total_storage if self.signal_gate_start is None else self.signal_gate_start

    @property
    def n_trials(self) -> int:
        return self.n_preps * self.trials_per_prep

    @property
    def trials_per_herald(self) -> int:
        if self.mode == "semi_conditional":
            return 1 + self.follow_up_trials
        return 1

    @property
    def herald_time(self) -> float:
        """Intra-trial herald time in herald-triggered modes."""
        return self.gate_start + 0.5 * self.signal_gate - self.total_storage

    @property
    def retrieved_tau_c(self) -> float:
        """FWHM of the echo's coincidence envelope around herald + total storage."""
        if self.echo_tau_c is not None:
            return self.echo_tau_c
        # double exponential holding ``echo_capture`` inside the coincidence window
        return 2.0 * LN2 * (0.5 * self.coincidence_window) / -math.log(1.0 - self.echo_capture)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("trial_period", "signal_gate", "coincidence_window"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.idler_gate < 0 or self.afc_delay < 0 or self.spin_time < 0:
            raise ConfigurationError("idler_gate, afc_delay and spin_time must be non-negative")
        if self.trials_per_prep < 0 or self.n_preps < 0 or self.follow_up_trials < 0:
            raise ConfigurationError("trial counts must be non-negative")
        if not self.trial_period > self.afc_delay + self.spin_time + self.signal_gate:
            raise ConfigurationError("trial_period must exceed afc_delay + spin_time + signal_gate")
        if self.gate_start < 0 or self.gate_start + self.signal_gate > self.trial_period:
            raise ConfigurationError("signal gate must lie inside the trial")
        if self.idler_gate > self.gate_start:
            raise ConfigurationError("idler gate must close before the signal gate opens")
        if self.coincidence_window > self.signal_gate:
            raise ConfigurationError("coincidence_window must not exceed signal_gate")
        if not 0 < self.echo_capture < 1:
            raise ConfigurationError("echo_capture must lie in (0, 1)")
        if not 0 <= self.filter_transmission <= 1 or not 0 <= self.duty_cycle <= 1:
            raise ConfigurationError("filter_transmission and duty_cycle must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseModel:
    """Control-pulse noise floors in photons per trial inside ``reference_window``."""

    floor_unconditional: float = 1.3e-3
    floor_conditional: float = 2.0e-3
    floor_after_first_cp: float = 2.3e-3
    dark_rate: float | None = None
    reference_window: float = 320e-9

    def validate(self) -> None:
        for name in ("floor_unconditional", "floor_conditional", "floor_after_first_cp"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.dark_rate is not None and self.dark_rate < 0:
            raise ConfigurationError("dark_rate must be non-negative")
        if not self.reference_window > 0:
            raise ConfigurationError("reference_window must be positive")


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.5
    dark_rate: float = 10.0
    gate_windows: tuple = ()

    def validate(self) -> None:
        if not 0 <= self.efficiency <= 1:
            raise ConfigurationError("detector efficiency must lie in [0, 1]")
        if self.dark_rate < 0:
            raise ConfigurationError("dark_rate must be non-negative")


DEFAULT_DETECTORS = {
    "idler": DetectorModel(efficiency=0.1, dark_rate=10.0),
    "signal_a": DetectorModel(efficiency=0.5, dark_rate=10.0),
    "signal_b": DetectorModel(efficiency=0.45, dark_rate=15.0),
}


@dataclass(frozen=True)
class ControlPulse:
    amplitude_fwhm: float = 2.4e-6
    chirp_span: float = 3.0e6
    peak_power: float = 21e-3
    spacing: float = 6e-6

    def __post_init__(self):
        if not self.amplitude_fwhm > 0:
            raise ValueError("amplitude_fwhm must be positive")


def control_pulse_waveform(t, cp: ControlPulse):
    """Normalised Gaussian amplitude and tanh frequency chirp (Hz) at times ``t`` from the pulse centre."""
    t = np.asarray(t, dtype=float)
    amp = np.exp(-4.0 * LN2 * t**2 / cp.amplitude_fwhm**2)
    offset = 0.5 * cp.chirp_span * np.tanh(4.0 * t / cp.amplitude_fwhm)
    return amp, offset


def cp_noise_schedule(noise: NoiseModel, mode: str) -> dict:
    """Expected noise photons per reference window in the AFC-echo and spin-wave-echo modes.

    The second control pulse leaves ``CP2_NOISE_RATIO`` of the noise seen after
    the first. Herald-triggered storage reads its spin-wave floor from the
    first-pulse measurement, the semi-conditional and unconditional sequences
    from their own measured floors.
    """
    if mode == "conditional":
        afc = noise.floor_after_first_cp
        return {"afc_echo": afc, "spin_wave_echo": CP2_NOISE_RATIO * afc}
    if mode == "semi_conditional":
        sw = noise.floor_conditional
    elif mode == "unconditional":
        sw = noise.floor_unconditional
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return {"afc_echo": sw / CP2_NOISE_RATIO, "spin_wave_echo": sw}


def retrieval_probability(mem: MemoryEfficiency, spin: SpinParams, seq: StorageSequence) -> float:
    """Probability that a photon at the memory is re-emitted into the detection path."""
    eta_c = spin_dephasing_efficiency(spin.t_s, spin.gamma_inh)
    return mem.eta_afc * mem.eta_t**2 * eta_c * seq.filter_transmission


def _detectors(det) -> dict:
    if det is None:
        return dict(DEFAULT_DETECTORS)
    if isinstance(det, DetectorModel):
        return {"idler": DEFAULT_DETECTORS["idler"], "signal_a": det, "signal_b": det}
    out = dict(DEFAULT_DETECTORS)
    out.update(det)
    return out


def validate_configuration(seq, source, mem, spin, noise, det) -> None:
    seq.validate()
    noise.validate()
    for d in _detectors(det).values():
        d.validate()
    if abs(spin.t_s - seq.spin_time) > 1e-12:
        raise ConfigurationError("spin.t_s must equal sequence.spin_time")
    if abs(spin.afc_delay - seq.afc_delay) > 1e-12:
        raise ConfigurationError("spin.afc_delay must equal sequence.afc_delay")


@dataclass
class _Events:
    time: list = field(default_factory=list)
    trial: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def add(self, trial, intra_s, flag):
        trial = np.asarray(trial, dtype=np.int64)
        self.trial.append(trial)
        self.time.append(np.rint(np.asarray(intra_s) * PS).astype(np.int64))
        self.flags.append(np.broadcast_to(np.asarray(flag, dtype=np.int64), trial.shape).copy())

    def finish(self, period_ps: int):
        if not self.time:
            z = np.zeros(0, dtype=np.int64)
            return z, z.copy(), z.copy()
        trial = np.concatenate(self.trial)
        t = np.concatenate(self.time) + trial * period_ps
        flags = np.concatenate(self.flags)
        order = np.argsort(t, kind="stable")
        return t[order], trial[order], flags[order]


def _gate_uniform(rng, n, start, width):
    return start + width * rng.random(n)


def _detect_split(rng, events_by_channel, trial, intra, flag, split, dets):
    """Route single photons to one HBT output (or signal_a) and apply its efficiency."""
    n = len(trial)
    if split:
        to_b = rng.random(n) < 0.5
    else:
        to_b = np.zeros(n, dtype=bool)
    eff = np.where(to_b, dets["signal_b"].efficiency, dets["signal_a"].efficiency)
    hit = rng.random(n) < eff
    for name, sel in (("signal_a", hit & ~to_b), ("signal_b", hit & to_b)):
        events_by_channel[name].add(trial[sel], intra[sel], flag)


def _poisson_in_gate(rng, out, name, k0, k1, mean_per_trial, gate_start, gate_width, flag, trials=None):
    """Poisson events per trial, uniform inside the gate, over trials ``k0..k1`` (or ``trials``)."""
    pool = np.arange(k0, k1) if trials is None else trials
    if len(pool) == 0 or mean_per_trial <= 0:
        return
    n = rng.poisson(mean_per_trial * len(pool))
    which = pool[rng.integers(0, len(pool), size=n)] if trials is not None else rng.integers(k0, k1, size=n)
    out[name].add(which, _gate_uniform(rng, n, gate_start, gate_width), flag)


def _unconditional_batch(k0, k1, seed, seq, source, eta_ret, noise, dets):
    rng = np.random.default_rng(seed)
    out = {c.value: _Events() for c in (Channel.IDLER, Channel.SIGNAL_A, Channel.SIGNAL_B)}
    n = k1 - k0
    gate_i, gate_s, g0 = seq.idler_gate, seq.signal_gate, seq.gate_start
    window_scale = gate_s / noise.reference_window

    if n > 0 and gate_i > 0 and source.pair_rate > 0:
        idler_u, signal_u = sample_pair_emissions(source, n * gate_i, rng)
        detected = rng.random(len(idler_u)) < dets["idler"].efficiency
        idler_u, signal_u = idler_u[detected], signal_u[detected]
        trial = k0 + np.minimum((idler_u // gate_i).astype(np.int64), n - 1)
        x = idler_u - (trial - k0) * gate_i
        out["idler"].add(trial, x, Flag.HERALD)

        stored = ~np.isnan(signal_u) & (rng.random(len(idler_u)) < eta_ret)
        tr, xe = trial[stored], x[stored]
        echo = xe + seq.total_storage + sample_delays(len(tr), seq.retrieved_tau_c, rng)
        inside = (echo >= g0) & (echo < g0 + gate_s)
        _detect_split(rng, out, tr[inside], echo[inside], Flag.ECHO, seq.hbt, dets)

    _poisson_in_gate(rng, out, "idler", k0, k1, dets["idler"].dark_rate * gate_i, 0.0, gate_i, Flag.DARK)

    floor = cp_noise_schedule(noise, "unconditional")["spin_wave_echo"]
    _signal_noise(rng, out, k0, k1, floor * window_scale, seq, noise, dets, None)
    return out


def _signal_noise(rng, out, k0, k1, mean_photons, seq, noise, dets, trials, flag_extra=0):
    names = ("signal_a", "signal_b") if seq.hbt else ("signal_a",)
    split = 0.5 if seq.hbt else 1.0
    g0, gate_s = seq.gate_start, seq.signal_gate
    for name in names:
        d = dets[name]
        _poisson_in_gate(rng, out, name, k0, k1, mean_photons * split * d.efficiency,
                         g0, gate_s, Flag.NOISE | flag_extra, trials)
        dark = noise.dark_rate if noise.dark_rate is not None else d.dark_rate
        _poisson_in_gate(rng, out, name, k0, k1, dark * gate_s, g0, gate_s,
                         Flag.DARK | flag_extra, trials)


def _triggered_batch(h0, h1, seed, seq, source, eta_ret, noise, dets):
    rng = np.random.default_rng(seed)
    out = {c.value: _Events() for c in (Channel.IDLER, Channel.SIGNAL_A, Channel.SIGNAL_B)}
    group = seq.trials_per_herald
    heralds = np.arange(h0, h1, dtype=np.int64)
    first = heralds * group
    n = len(heralds)
    x_h = seq.herald_time

    herald_rate = source.pair_rate * dets["idler"].efficiency
    dark = dets["idler"].dark_rate
    p_dark = dark / (herald_rate + dark) if herald_rate + dark > 0 else 1.0
    is_dark = rng.random(n) < p_dark
    out["idler"].add(first, np.full(n, x_h), np.where(is_dark, Flag.DARK, Flag.HERALD))

    present = ~is_dark & (rng.random(n) < source.heralding_efficiency)
    stored = present & (rng.random(n) < eta_ret)
    tr = first[stored]
    echo = x_h + seq.total_storage + sample_delays(len(tr), seq.retrieved_tau_c, rng)
    inside = (echo >= seq.gate_start) & (echo < seq.gate_start + seq.signal_gate)
    _detect_split(rng, out, tr[inside], echo[inside], Flag.ECHO, seq.hbt, dets)

    floor = cp_noise_schedule(noise, seq.mode)["spin_wave_echo"]
    mean = floor * seq.signal_gate / noise.reference_window
    _signal_noise(rng, out, 0, 0, mean, seq, noise, dets, first)
    if group > 1:
        follow = (first[:, None] + np.arange(1, group)[None, :]).ravel()
        _signal_noise(rng, out, 0, 0, mean, seq, noise, dets, follow, Flag.FOLLOW_UP)
    return out


def run_sequence(seq: StorageSequence, source: BiphotonSpec, mem: MemoryEfficiency,
                 spin: SpinParams, noise: NoiseModel, det=None, seed: int = 0,
                 threads: int = 1) -> dict[str, TimestampStream]:
    """Simulate ``seq.n_trials`` storage trials and return detector streams keyed by channel.

    ``det`` is a single signal :class:`DetectorModel` or a mapping with keys
    ``idler``, ``signal_a``, ``signal_b``. The output is bit-identical for a
    fixed ``seed`` whatever the value of ``threads``.
    """
    validate_configuration(seq, source, mem, spin, noise, det)
    dets = _detectors(det)
    eta_ret = retrieval_probability(mem, spin, seq)
    period_ps = int(round(seq.trial_period * PS))
    root = np.random.SeedSequence(seed)

    if seq.mode == "unconditional":
        n_trials = seq.n_trials
        step = UNCONDITIONAL_BATCH
        bounds = [(k, min(k + step, n_trials)) for k in range(0, n_trials, step)]
        worker = _unconditional_batch
    else:
        n_heralds = seq.n_trials // seq.trials_per_herald
        n_trials = n_heralds * seq.trials_per_herald
        step = CONDITIONAL_BATCH
        bounds = [(h, min(h + step, n_heralds)) for h in range(0, n_heralds, step)]
        worker = _triggered_batch
    seeds = root.spawn(len(bounds))
    log.info("simulating %d %s trials in %d batches", n_trials, seq.mode, len(bounds))

    def job(i):
        lo, hi = bounds[i]
        return worker(lo, hi, seeds[i], seq, source, eta_ret, noise, dets)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(len(bounds))))
    else:
        parts = [job(i) for i in range(len(bounds))]

    streams = {}
    for ch in (Channel.IDLER, Channel.SIGNAL_A, Channel.SIGNAL_B):
        merged = _Events()
        for p in parts:
            merged.time.extend(p[ch.value].time)
            merged.trial.extend(p[ch.value].trial)
            merged.flags.extend(p[ch.value].flags)
        t, k, f = merged.finish(period_ps)
        streams[ch.value] = TimestampStream(ch, t, k, f, period_ps, n_trials)
    return streams
