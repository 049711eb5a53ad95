"""Preset configurations for the reference experiment."""

from __future__ import annotations

from .config import RunConfig
from .source import BiphotonSpec

# pairs per second whose idler reaches the idler detector, and the transmission
# of the spectral filter after the memory; together they set about 2 % herald
# probability per 4.5 us gate and a 3.5 % in-window retrieval efficiency
PAIR_RATE = 4.4e4
FILTER_TRANSMISSION = 0.83


def unconditional(n_preps: int = 300_000, seed: int = 20180801) -> RunConfig:
    """Blind storage trials, 500 per comb preparation, with an HBT split after the memory."""
    cfg = RunConfig(source=BiphotonSpec(pair_rate=PAIR_RATE), seed=seed)
    return cfg.with_sequence(mode="unconditional", n_preps=n_preps,
                             filter_transmission=FILTER_TRANSMISSION, hbt=True)


def semi_conditional(n_heralds: int = 2_000_000, seed: int = 20180802) -> RunConfig:
    """Herald-triggered trials, each followed by 15 noise-only trials, single signal detector."""
    cfg = RunConfig(source=BiphotonSpec(pair_rate=PAIR_RATE), seed=seed)
    per = 1 + cfg.sequence.follow_up_trials
    trials = n_heralds * per
    tpp = cfg.sequence.trials_per_prep
    return cfg.with_sequence(mode="semi_conditional", n_preps=-(-trials // tpp),
                             filter_transmission=FILTER_TRANSMISSION, hbt=False)


PRESETS = {"unconditional": unconditional, "semi_conditional": semi_conditional}

