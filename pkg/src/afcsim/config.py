"""Run configuration: TOML with SI-suffixed keys.

Every physical quantity carries its unit in the key (``trial_period_s``,
``bandwidth_fwhm_hz``); dimensionless quantities have bare keys. Scaled
units are accepted on input (``trial_period_us = 190``) and written back in
base units. Missing keys take the dataclass defaults, unknown keys are
rejected.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .memory import CombDesign, SpinParams
from .sequence import DEFAULT_DETECTORS, ConfigurationError, DetectorModel, NoiseModel, StorageSequence
from .source import BiphotonSpec

UNITS = {
    "source": {"bandwidth_fwhm": "hz", "pair_rate": "hz", "signal_wavelength": "m",
               "idler_wavelength": "m", "cavity_fsr": "hz", "pump_power": "w"},
    "comb": {"periodicity": "hz", "total_width": "hz"},
    "spin": {"gamma_inh": "hz"},
    "sequence": {"trial_period": "s", "afc_delay": "s", "spin_time": "s", "idler_gate": "s",
                 "signal_gate": "s", "signal_gate_start": "s", "coincidence_window": "s",
                 "pump_off_duration": "s", "echo_tau_c": "s"},
    "noise": {"dark_rate": "hz", "reference_window": "s"},
    "detector": {"dark_rate": "hz"},
    "efficiency": {},
    "analysis": {"bin_width": "s", "histogram_half_span": "s", "windows": "s",
                 "multimode_window": "s", "idler_gates": "s"},
}


SCALES = {
    "s": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9, "ps": 1e-12},
    "hz": {"hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9},
    "m": {"m": 1.0, "um": 1e-6, "nm": 1e-9},
    "w": {"w": 1.0, "mw": 1e-3},
}


@dataclass(frozen=True)
class EfficiencyInputs:
    """Measured efficiency factors that are inputs rather than derived."""

    eta_bw: float = 0.70
    eta_t: float = 0.725


@dataclass(frozen=True)
class AnalysisConfig:
    bin_width: float = 40e-9
    histogram_half_span: float = 2.0e-6
    windows: tuple = (320e-9, 1e-6)
    multimode_window: float = 640e-9
    idler_gates: tuple = (320e-9, 640e-9, 1.28e-6, 2.56e-6, 4.5e-6)
    cross_neighbors: int = 20
    semi_neighbors: int = 15
    auto_neighbors: int = 20
    idler_auto_sigma: float = 0.04

    def validate(self) -> None:
        if not self.bin_width > 0 or not self.histogram_half_span > 0:
            raise ConfigurationError("analysis.bin_width and histogram_half_span must be positive")
        if any(not w > 0 for w in self.windows) or not self.multimode_window > 0:
            raise ConfigurationError("analysis windows must be positive")
        if min(self.cross_neighbors, self.semi_neighbors, self.auto_neighbors) < 1:
            raise ConfigurationError("analysis neighbour counts must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    source: BiphotonSpec = field(default_factory=BiphotonSpec)
    comb: CombDesign = field(default_factory=CombDesign)
    spin: SpinParams = field(default_factory=SpinParams)
    sequence: StorageSequence = field(default_factory=StorageSequence)
    noise: NoiseModel = field(default_factory=NoiseModel)
    detectors: dict = field(default_factory=lambda: dict(DEFAULT_DETECTORS))
    efficiency: EfficiencyInputs = field(default_factory=EfficiencyInputs)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0
    output_dir: str | None = None

    def validate(self) -> None:
        self.sequence.validate()
        self.noise.validate()
        self.analysis.validate()
        for name, d in self.detectors.items():
            try:
                d.validate()
            except ConfigurationError as exc:
                raise ConfigurationError(f"detectors.{name}: {exc}") from None
        if abs(self.comb.storage_time - self.sequence.afc_delay) > 1e-6 * self.sequence.afc_delay:
            raise ConfigurationError("comb.periodicity_hz must equal 1 / sequence.afc_delay_s")
        for name in ("eta_bw", "eta_t"):
            if not 0 <= getattr(self.efficiency, name) <= 1:
                raise ConfigurationError(f"efficiency.{name} must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def with_sequence(self, **changes) -> "RunConfig":
        seq = replace(self.sequence, **changes)
        spin = replace(self.spin, t_s=seq.spin_time, afc_delay=seq.afc_delay)
        return replace(self, sequence=seq, spin=spin)


def _section_to_toml(obj, units: dict) -> dict:
    out = {}
    for f in fields(obj):
        if f.name == "gate_windows":
            continue
        v = getattr(obj, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = list(v)
        unit = units.get(f.name)
        out[f"{f.name}_{unit}" if unit else f.name] = v
    return out


def to_dict(cfg: RunConfig) -> dict:
    """Nested plain-data form with SI-suffixed keys."""
    d = {"seed": cfg.seed}
    if cfg.output_dir is not None:
        d["output_dir"] = str(cfg.output_dir)
    d["source"] = _section_to_toml(cfg.source, UNITS["source"])
    d["comb"] = _section_to_toml(cfg.comb, UNITS["comb"])
    d["spin"] = {"gamma_inh_hz": cfg.spin.gamma_inh}
    d["sequence"] = _section_to_toml(cfg.sequence, UNITS["sequence"])
    d["noise"] = _section_to_toml(cfg.noise, UNITS["noise"])
    d["detectors"] = {k: _section_to_toml(v, UNITS["detector"]) for k, v in sorted(cfg.detectors.items())}
    d["efficiency"] = _section_to_toml(cfg.efficiency, UNITS["efficiency"])
    d["analysis"] = _section_to_toml(cfg.analysis, UNITS["analysis"])
    return d


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical form; independent of key order and output location."""
    d = to_dict(cfg)
    d.pop("output_dir", None)
    canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _section_from_toml(cls, data, units: dict, path: str, skip=()):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a table")
    known = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        unit = units.get(f.name)
        if unit:
            for suffix, factor in SCALES[unit].items():
                known[f"{f.name}_{suffix}"] = (f, factor)
        else:
            known[f.name] = (f, None)
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigurationError(f"{path}.{key}: unknown key")
        f, factor = known[key]
        if f.name in kwargs:
            raise ConfigurationError(f"{path}.{key}: {f.name} given more than once")
        default = f.default if f.default is not f.default_factory else None
        if isinstance(value, list):
            value = tuple(value)
        if default is None:  # optional physical quantities
            default = 0.0
        if isinstance(value, bool) != isinstance(default, bool):
            raise ConfigurationError(f"{path}.{key}: expected {type(default).__name__}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigurationError(f"{path}.{key}: expected a number, got {value!r}")
            if isinstance(default, int) and not isinstance(default, bool):
                if value != int(value):
                    raise ConfigurationError(f"{path}.{key}: expected an integer")
                value = int(value)
            else:
                value = float(value)
            if not math.isfinite(value):
                raise ConfigurationError(f"{path}.{key}: must be finite")
        if factor is not None:
            try:
                value = tuple(float(v) * factor for v in value) if isinstance(value, tuple) \
                    else value * factor
            except TypeError:
                raise ConfigurationError(f"{path}.{key}: expected numbers") from None
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def from_dict(data: dict) -> RunConfig:
    allowed = {"seed", "output_dir", "source", "comb", "spin", "sequence", "noise", "detectors",
               "efficiency", "analysis"}
    for key in data:
        if key not in allowed:
            raise ConfigurationError(f"{key}: unknown key")
    seq = _section_from_toml(StorageSequence, data.get("sequence", {}), UNITS["sequence"], "sequence")
    spin_data = data.get("spin", {})
    if set(spin_data) - {"gamma_inh_hz"}:
        bad = sorted(set(spin_data) - {"gamma_inh_hz"})[0]
        raise ConfigurationError(f"spin.{bad}: unknown key (storage times live in [sequence])")
    spin = _section_from_toml(SpinParams, spin_data, UNITS["spin"], "spin", skip=("t_s", "afc_delay"))
    spin = replace(spin, t_s=seq.spin_time, afc_delay=seq.afc_delay)
    dets = dict(DEFAULT_DETECTORS)
    det_data = data.get("detectors", {})
    if not isinstance(det_data, dict):
        raise ConfigurationError("detectors: expected a table")
    for name, d in det_data.items():
        if name not in DEFAULT_DETECTORS:
            raise ConfigurationError(f"detectors.{name}: unknown detector")
        dets[name] = _section_from_toml(DetectorModel, d, UNITS["detector"], f"detectors.{name}",
                                        skip=("gate_windows",))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigurationError("seed: expected an integer")
    cfg = RunConfig(
        source=_section_from_toml(BiphotonSpec, data.get("source", {}), UNITS["source"], "source"),
        comb=_section_from_toml(CombDesign, data.get("comb", {}), UNITS["comb"], "comb"),
        spin=spin,
        sequence=seq,
        noise=_section_from_toml(NoiseModel, data.get("noise", {}), UNITS["noise"], "noise"),
        detectors=dets,
        efficiency=_section_from_toml(EfficiencyInputs, data.get("efficiency", {}), {}, "efficiency"),
        analysis=_section_from_toml(AnalysisConfig, data.get("analysis", {}), UNITS["analysis"], "analysis"),
        seed=seed,
        output_dir=data.get("output_dir"),
    )
    cfg.validate()
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    return from_dict(data)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)
