"""Channelized detector timestamp streams and their on-disk format.

A stream file is UTF-8 text: one header line ``#afc-ts v1 <json metadata>``
followed by CSV rows ``channel,trial_index,time_ps,flags``. Several channels
may share one file. Times are integer picoseconds since run start and trial
``k`` starts at ``k * trial_period_ps``.
"""

from __future__ import annotations

import enum
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "#afc-ts"
VERSION = "v1"


class Channel(str, enum.Enum):
    IDLER = "idler"
    SIGNAL_A = "signal_a"
    SIGNAL_B = "signal_b"
    REFERENCE = "reference"


class Flag(enum.IntFlag):
    """Event provenance bits carried in the ``flags`` column."""

    NONE = 0
    HERALD = 1  # idler detection from a real pair
    ECHO = 2  # retrieved spin-wave echo photon
    NOISE = 4  # control-pulse noise photon
    DARK = 8  # detector dark count
    FOLLOW_UP = 16  # event in a noise-only follow-up trial
    PAIR = 32  # signal photon of a pair, no memory in the path


class StreamFormatError(ValueError):
    """Raised for malformed, truncated or inconsistent stream files."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class TimestampStream:
    channel: Channel
    time_ps: np.ndarray
    trial_index: np.ndarray
    flags: np.ndarray
    trial_period_ps: int
    n_trials: int = 0

    def __post_init__(self):
        self.channel = Channel(self.channel)
        self.time_ps = np.asarray(self.time_ps, dtype=np.int64)
        self.trial_index = np.asarray(self.trial_index, dtype=np.int64)
        self.flags = np.asarray(self.flags, dtype=np.int64)
        if not (len(self.time_ps) == len(self.trial_index) == len(self.flags)):
            raise ValueError("time_ps, trial_index and flags must have equal length")
        if self.trial_period_ps <= 0:
            raise ValueError("trial_period_ps must be positive")
        if len(self.time_ps) and np.any(np.diff(self.time_ps) < 0):
            raise ValueError(f"{self.channel.value}: event times are not non-decreasing")

    @classmethod
    def empty(cls, channel, trial_period_ps: int, n_trials: int = 0) -> "TimestampStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(channel, z, z.copy(), z.copy(), trial_period_ps, n_trials)

    def __len__(self) -> int:
        return len(self.time_ps)

    @property
    def trial_time_ps(self) -> np.ndarray:
        """Event time relative to the start of its own trial."""
        return self.time_ps - self.trial_index * self.trial_period_ps

    def select(self, mask) -> "TimestampStream":
        mask = np.asarray(mask)
        return TimestampStream(self.channel, self.time_ps[mask], self.trial_index[mask],
                               self.flags[mask], self.trial_period_ps, self.n_trials)

    def within_trial_window(self, start_ps: int, stop_ps: int) -> "TimestampStream":
        """Keep events whose intra-trial time lies in ``[start_ps, stop_ps)``."""
        tt = self.trial_time_ps
        return self.select((tt >= start_ps) & (tt < stop_ps))

    def with_flags(self, flag: int) -> "TimestampStream":
        return self.select((self.flags & int(flag)) != 0)

    def thin(self, keep_probability: float, rng: np.random.Generator) -> "TimestampStream":
        """Independent Bernoulli loss applied to every event."""
        return self.select(rng.random(len(self)) < keep_probability)

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.any(self.trial_index < 0):
            raise StreamFormatError(f"{self.channel.value}: negative trial index")
        if self.n_trials and np.any(self.trial_index >= self.n_trials):
            raise StreamFormatError(f"{self.channel.value}: trial index beyond n_trials")
        tt = self.trial_time_ps
        if np.any(tt < 0) or np.any(tt >= self.trial_period_ps):
            raise StreamFormatError(
                f"{self.channel.value}: trial_index inconsistent with trial period")


def merge_streams(streams, channel) -> TimestampStream:
    """Union of several streams into one channel, stable in time order."""
    streams = list(streams)
    t = np.concatenate([s.time_ps for s in streams])
    order = np.argsort(t, kind="stable")
    return TimestampStream(
        channel,
        t[order],
        np.concatenate([s.trial_index for s in streams])[order],
        np.concatenate([s.flags for s in streams])[order],
        streams[0].trial_period_ps,
        max(s.n_trials for s in streams),
    )


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_streams(streams: Mapping[str, TimestampStream] | list, metadata: dict) -> str:
    streams = list(streams.values()) if isinstance(streams, Mapping) else list(streams)
    if not streams:
        raise ValueError("at least one stream is required")
    period = streams[0].trial_period_ps
    if any(s.trial_period_ps != period for s in streams):
        raise ValueError("all streams in one file must share the trial period")
    for key in ("seed", "config_hash"):
        if key not in metadata:
            raise ValueError(f"stream metadata must include {key!r}")
    meta = dict(metadata)
    meta["trial_period_ps"] = int(period)
    meta["n_trials"] = int(max(s.n_trials for s in streams))
    meta["channels"] = [s.channel.value for s in streams]
    meta["n_rows"] = int(sum(len(s) for s in streams))

    buf = io.StringIO()
    buf.write(f"{MAGIC} {VERSION} {json.dumps(meta, sort_keys=True)}\n")
    for s in streams:
        if len(s) == 0:
            continue
        block = np.column_stack([s.trial_index, s.time_ps, s.flags])
        prefix = s.channel.value + ","
        buf.write("".join(prefix + f"{k},{t},{f}\n" for k, t, f in block.tolist()))
    return buf.getvalue()


def write_streams(path, streams, metadata: dict) -> None:
    atomic_write_text(path, format_streams(streams, metadata))


def parse_streams(data: bytes | str) -> tuple[dict[str, TimestampStream], dict]:
    """Parse a stream file body; returns ``({channel: stream}, metadata)``."""
    raw = data.encode("utf-8") if isinstance(data, str) else data
    nl = raw.find(b"\n")
    if nl < 0:
        raise StreamFormatError("missing header line", 0)
    header = raw[:nl].decode("utf-8", errors="replace")
    parts = header.split(" ", 2)
    if len(parts) < 3 or parts[0] != MAGIC:
        raise StreamFormatError("not an afc-ts stream file", 0)
    if parts[1] != VERSION:
        raise StreamFormatError(f"unsupported stream version {parts[1]!r}", 0)
    try:
        meta = json.loads(parts[2])
    except json.JSONDecodeError as exc:
        raise StreamFormatError(f"bad header metadata: {exc.msg}", exc.pos) from None
    for key in ("seed", "config_hash", "trial_period_ps"):
        if key not in meta:
            raise StreamFormatError(f"header metadata lacks {key!r}", 0)
    period = int(meta["trial_period_ps"])
    n_trials = int(meta.get("n_trials", 0))

    body = raw[nl + 1:]
    if body and not body.endswith(b"\n"):
        last = body.rfind(b"\n") + 1
        raise StreamFormatError("truncated final row", nl + 1 + last)
    rows = _fast_rows(body)
    if rows is None:
        rows = _slow_rows(body, nl + 1)
    n_rows = len(rows)
    if "n_rows" in meta and n_rows != int(meta["n_rows"]):
        raise StreamFormatError(
            f"file holds {n_rows} rows but header declares {meta['n_rows']}; truncated", len(raw))

    channels = meta.get("channels") or [c.value for c in Channel if (rows[:, 0] == _CODES[c.value]).any()]
    out: dict[str, TimestampStream] = {}
    for name in channels:
        try:
            sel = rows[rows[:, 0] == _CODES[Channel(name).value]]
            s = TimestampStream(name, sel[:, 2], sel[:, 1], sel[:, 3], period, n_trials)
        except ValueError as exc:
            raise StreamFormatError(str(exc)) from None
        s.validate()
        out[s.channel.value] = s
    return out, meta


_CODES = {c.value: i for i, c in enumerate(Channel)}


def _fast_rows(body: bytes):
    """Vectorised parse of well-formed rows; ``None`` when anything looks off."""
    if not body:
        return np.zeros((0, 4), dtype=np.int64)
    named = sum(body.count(b"\n" + n.encode() + b",") for n in _CODES)
    named += any(body.startswith(n.encode() + b",") for n in _CODES)
    if named != body.count(b"\n"):
        return None
    coded = body
    for name, code in _CODES.items():
        coded = coded.replace(name.encode() + b",", f"{code},".encode())
    try:
        rows = np.loadtxt(io.BytesIO(coded), delimiter=",", dtype=np.int64, ndmin=2)
    except ValueError:
        return None
    if rows.shape[1] != 4:
        return None
    return rows


def _slow_rows(body: bytes, offset: int) -> np.ndarray:
    """Line-by-line parse that reports the byte offset of the first bad row."""
    out = []
    for line in body.split(b"\n")[:-1] if body else []:
        fields = line.split(b",")
        if len(fields) != 4:
            raise StreamFormatError("expected 4 columns", offset)
        try:
            code = _CODES[Channel(fields[0].decode("ascii")).value]
            out.append((code, int(fields[1]), int(fields[2]), int(fields[3])))
        except (ValueError, UnicodeDecodeError):
            raise StreamFormatError("unparseable row", offset) from None
        offset += len(line) + 1
    return np.array(out, dtype=np.int64).reshape(-1, 4)


def read_streams(path) -> tuple[dict[str, TimestampStream], dict]:
    return parse_streams(Path(path).read_bytes())
