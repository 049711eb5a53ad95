import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from afcsim.streams import Channel, TimestampStream

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

PERIOD_PS = 190_000_000


def poisson_stream(channel, n_trials, mean_per_trial, gate=(0, 4_500_000), seed=0,
                   period_ps=PERIOD_PS) -> TimestampStream:
    """Independent Poisson events, uniform inside an intra-trial gate (ps)."""
    rng = np.random.default_rng(seed)
    n = rng.poisson(mean_per_trial * n_trials)
    trial = rng.integers(0, n_trials, size=n)
    t = trial * period_ps + rng.integers(gate[0], gate[1], size=n)
    order = np.argsort(t, kind="stable")
    return TimestampStream(channel, t[order], trial[order], np.zeros(n, dtype=np.int64),
                           period_ps, n_trials)


@pytest.fixture(scope="session")
def small_unconditional():
    from afcsim.analysis import simulate
    from afcsim.scenarios import unconditional

    cfg = unconditional(n_preps=4000, seed=11)
    return cfg, simulate(cfg)


@pytest.fixture(scope="session")
def small_semi():
    from afcsim.analysis import simulate
    from afcsim.scenarios import semi_conditional

    cfg = semi_conditional(n_heralds=200_000, seed=12)
    return cfg, simulate(cfg)


@pytest.fixture
def idler_signal_poisson():
    n = 200_000
    idler = poisson_stream(Channel.IDLER, n, 0.05, seed=1)
    sig = poisson_stream(Channel.SIGNAL_A, n, 0.05, gate=(13_300_000, 17_800_000), seed=2)
    return idler, sig


ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    """Log one pass/fail line for an acceptance criterion, then assert it."""
    def _record(criterion, ok, detail):
        line = f"criterion {criterion:>3}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
