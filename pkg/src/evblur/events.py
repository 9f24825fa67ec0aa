"""Event streams: storage, file formats, temporal slicing and rasterization.

Events are kept column-wise (``t``, ``x``, ``y``, ``p`` arrays) sorted by
timestamp. Timestamps are integer microseconds.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

EVT_MAGIC = b"EVT1"
EVT_HEADER = struct.Struct("<4sIIQ")
# 14-byte packed record: u64 t, u16 x, u16 y, i8 polarity, u8 pad
EVT_RECORD = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "u1")]
)


class EventFormatError(ValueError):
    """Raised for malformed event files."""


class EventValidationError(ValueError):
    """Raised when event records violate the stream invariants."""


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True, eq=False)
class EventStream:
    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    @classmethod
    def from_arrays(cls, width, height, t, x, y, p, *, validate=True) -> "EventStream":
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int8).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise EventValidationError("event columns differ in length")
        if validate:
            _validate(width, height, t, x, y, p)
        if len(t) > 1 and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        for a in (t, x, y, p):
            a.setflags(write=False)
        return cls(int(width), int(height), t, x, y, p)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls.from_arrays(width, height, z, z, z, z)

    @classmethod
    def from_events(cls, width: int, height: int, events: list[Event]) -> "EventStream":
        cols = np.array([(e.t, e.x, e.y, e.polarity) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls.from_arrays(width, height, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3])

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t, self.x, self.y, self.p):
            yield Event(int(t), int(x), int(y), int(p))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))
        )

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    def columns(self) -> tuple[np.ndarray, ...]:
        return self.t, self.x, self.y, self.p

    def time_window(self, t_a: int, t_b: int) -> "EventStream":
        """Events with ``t_a <= t < t_b`` (binary search on sorted timestamps)."""
        i0 = int(np.searchsorted(self.t, t_a, side="left"))
        i1 = int(np.searchsorted(self.t, t_b, side="left"))
        i1 = max(i0, i1)
        return EventStream(self.width, self.height, self.t[i0:i1], self.x[i0:i1],
                           self.y[i0:i1], self.p[i0:i1])

    def shifted(self, dx: int, dy: int) -> "EventStream":
        """Spatially translated copy; events leaving the sensor are dropped."""
        x, y = self.x + dx, self.y + dy
        keep = (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)
        return EventStream.from_arrays(self.width, self.height, self.t[keep], x[keep], y[keep], self.p[keep])


def _validate(width, height, t, x, y, p) -> None:
    if width <= 0 or height <= 0:
        raise EventValidationError(f"invalid resolution {width}x{height}")
    bad = np.flatnonzero((x < 0) | (x >= width) | (y < 0) | (y >= height))
    if len(bad):
        i = int(bad[0])
        raise EventValidationError(
            f"record {i}: coordinate ({x[i]}, {y[i]}) outside {width}x{height} sensor"
        )
    bad = np.flatnonzero((p != 1) & (p != -1))
    if len(bad):
        i = int(bad[0])
        raise EventValidationError(f"record {i}: polarity {p[i]} is not +1/-1")
    bad = np.flatnonzero(t < 0)
    if len(bad):
        raise EventValidationError(f"record {int(bad[0])}: negative timestamp")


# ---------------------------------------------------------------------------
# file formats


def save_events(stream: EventStream, path: str | Path, format: str | None = None) -> None:
    path = Path(path)
    format = format or _guess_format(path)
    if format == "binary":
        rec = np.zeros(len(stream), dtype=EVT_RECORD)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        with open(path, "wb") as fh:
            fh.write(EVT_HEADER.pack(EVT_MAGIC, stream.width, stream.height, len(stream)))
            fh.write(rec.tobytes())
    elif format == "csv":
        with open(path, "w") as fh:
            fh.write(f"{stream.width},{stream.height}\n")
            for t, x, y, p in zip(*stream.columns()):
                fh.write(f"{t},{x},{y},{p}\n")
    else:
        raise ValueError(f"unknown event format {format!r}")


def load_events(path: str | Path, format: str | None = None) -> EventStream:
    path = Path(path)
    format = format or _guess_format(path)
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown event format {format!r}")


def _guess_format(path: Path) -> str:
    return "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"


def _load_binary(path: Path) -> EventStream:
    data = path.read_bytes()
    if len(data) < EVT_HEADER.size:
        raise EventFormatError(f"{path}: file shorter than header")
    magic, width, height, count = EVT_HEADER.unpack_from(data, 0)
    if magic != EVT_MAGIC:
        raise EventFormatError(f"{path}: bad magic {magic!r}")
    expected = EVT_HEADER.size + count * EVT_RECORD.itemsize
    if len(data) != expected:
        raise EventFormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    rec = np.frombuffer(data, dtype=EVT_RECORD, offset=EVT_HEADER.size, count=count)
    return EventStream.from_arrays(
        width, height, rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"]
    )


def _load_csv(path: Path) -> EventStream:
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if lines and lines[0].replace(" ", "").lower() == "width,height":
        lines = lines[1:]
    if not lines:
        raise EventFormatError(f"{path}: missing width,height header")
    try:
        width, height = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise EventFormatError(f"{path}: malformed header {lines[0]!r}") from None
    rows = []
    for i, ln in enumerate(lines[1:]):
        parts = ln.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"{path}: record {i} has {len(parts)} fields")
        try:
            rows.append([int(v) for v in parts])
        except ValueError:
            raise EventFormatError(f"{path}: record {i} is not numeric") from None
    cols = np.array(rows, dtype=np.int64).reshape(-1, 4)
    p = cols[:, 3].copy()
    p[p == 0] = -1
    return EventStream.from_arrays(width, height, cols[:, 0], cols[:, 1], cols[:, 2], p)


# ---------------------------------------------------------------------------
# slicing


@dataclass(frozen=True)
class EventSlice:
    """Events of a parent stream restricted to the half-open window [t_a, t_b)."""

    t_a: int
    t_b: int
    events: EventStream
    direction: int = 1
    index: int = 0

    @property
    def window(self) -> tuple[int, int]:
        return self.t_a, self.t_b

    @property
    def duration(self) -> int:
        return self.t_b - self.t_a

    @property
    def resolution(self) -> tuple[int, int]:
        return self.events.resolution

    def __len__(self) -> int:
        return len(self.events)


def slice_window(stream: EventStream, t_a: int, t_b: int, direction: int = 1) -> EventSlice:
    return EventSlice(int(t_a), int(t_b), stream.time_window(t_a, t_b), direction)


def slice_events(stream: EventStream, t_ref: int, delta_tau: int, n_e: int) -> list[EventSlice]:
    """Cumulative slices for indices -n_e..n_e around ``t_ref``.

    Slice ``t > 0`` covers [t_ref, t_ref + t*delta_tau); slice ``t < 0`` covers
    [t_ref + t*delta_tau, t_ref) and is marked with direction -1.
    """
    if n_e < 1:
        raise EventValidationError("n_e must be a positive integer")
    if delta_tau <= 0:
        raise EventValidationError("delta_tau must be positive")
    slices = []
    for i in range(-n_e, n_e + 1):
        if i >= 0:
            t_a, t_b, direction = t_ref, t_ref + i * delta_tau, 1
        else:
            t_a, t_b, direction = t_ref + i * delta_tau, t_ref, -1
        s = slice_window(stream, t_a, t_b, direction)
        slices.append(EventSlice(s.t_a, s.t_b, s.events, direction, i))
    return slices


# ---------------------------------------------------------------------------
# rasterization


@dataclass(frozen=True)
class EventCountImage:
    width: int
    height: int
    counts: np.ndarray  # (H, W) signed, or (2, H, W) split as [positive, negative]
    mode: str = "signed"

    def signed(self) -> np.ndarray:
        return self.counts if self.mode == "signed" else self.counts[0] - self.counts[1]


def accumulate(
    slice_or_stream: EventSlice | EventStream,
    resolution: tuple[int, int] | None = None,
    mode: Literal["signed", "split"] = "signed",
) -> EventCountImage:
    ev = slice_or_stream.events if isinstance(slice_or_stream, EventSlice) else slice_or_stream
    width, height = resolution or ev.resolution
    if (width, height) != ev.resolution:
        raise EventValidationError(f"resolution {width}x{height} does not match stream {ev.resolution}")
    flat = ev.y * width + ev.x
    n = width * height
    if mode == "signed":
        counts = np.bincount(flat, weights=ev.p.astype(np.float64), minlength=n).reshape(height, width)
    elif mode == "split":
        pos = np.bincount(flat[ev.p > 0], minlength=n)
        neg = np.bincount(flat[ev.p < 0], minlength=n)
        counts = np.stack([pos, neg]).astype(np.float64).reshape(2, height, width)
    else:
        raise ValueError(f"unknown accumulation mode {mode!r}")
    return EventCountImage(width, height, counts, mode)
