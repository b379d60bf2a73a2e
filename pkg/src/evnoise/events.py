"""
Event-stream containers and their on-disk formats.

Streams are held column-wise in numpy arrays rather than as lists of
``Event`` objects; ``Event`` exists for single-record access and for
readability in tests.

On-disk formats:

- CSV: ``# evnoise-events v1 width=<W> height=<H>`` then ``t,x,y,p`` lines,
  ``p`` in {0, 1} with 1 meaning positive polarity.
- Binary: magic ``EVN1``, u32 width, u32 height, u64 count, then ``count``
  16-byte records (u64 t, u16 x, u16 y, u8 p, 3 pad bytes), little-endian.
"""

from __future__ import annotations

import io
import os
import re
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Union

import numpy as np

MAGIC = b"EVN1"
CSV_HEADER = "# evnoise-events v1 width={w} height={h}"
_CSV_HEADER_RE = re.compile(rb"^#\s*evnoise-events\s+v1\s+width=(\d+)\s+height=(\d+)\s*$")

RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "V3")]
)
_BIN_HEADER = struct.Struct("<4sIIQ")

Source = Union[bytes, bytearray, str, os.PathLike, BinaryIO]


class EventFormatError(ValueError):
    """Malformed event data. ``offset`` is the byte offset of the bad record."""

    def __init__(self, message: str, offset: int | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.line = line


class EventValidationError(ValueError):
    """A record violates stream invariants. ``index`` names the offending event."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(f"event {index}: {message}" if index is not None else message)
        self.index = index


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    polarity: int

    def __post_init__(self):
        if self.polarity not in (1, -1):
            raise EventValidationError(f"polarity must be +1 or -1, got {self.polarity}")
        if self.t < 0:
            raise EventValidationError("negative timestamp")


class EventStream:
    """Immutable time-ordered event stream on a ``width`` x ``height`` sensor.

    Timestamps are integer microseconds; polarity is +1/-1 in memory.
    """

    __slots__ = ("width", "height", "t", "x", "y", "p")

    def __init__(self, width, height, t=(), x=(), y=(), p=(), *, validate=True):
        self.width = int(width)
        self.height = int(height)
        self.t = np.ascontiguousarray(t, dtype=np.int64)
        self.x = np.ascontiguousarray(x, dtype=np.int64)
        self.y = np.ascontiguousarray(y, dtype=np.int64)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        for a in (self.t, self.x, self.y, self.p):
            a.setflags(write=False)
        if validate:
            self.validate()

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls(width, height)

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        events = list(events)
        return cls(
            width,
            height,
            [e.t for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.polarity for e in events],
        )

    def validate(self) -> None:
        n = len(self.t)
        if self.width <= 0 or self.height <= 0:
            raise EventValidationError("sensor dimensions must be positive")
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise EventValidationError("column lengths differ")
        if n == 0:
            return
        checks = [
            (self.t < 0, "negative timestamp"),
            ((self.x < 0) | (self.x >= self.width), "x out of bounds"),
            ((self.y < 0) | (self.y >= self.height), "y out of bounds"),
            ((self.p != 1) & (self.p != -1), "polarity must be +1 or -1"),
        ]
        for bad, msg in checks:
            if bad.any():
                raise EventValidationError(msg, int(np.argmax(bad)))
        back = np.diff(self.t) < 0
        if back.any():
            raise EventValidationError("timestamps out of order", int(np.argmax(back)) + 1)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))
        return EventStream(
            self.width, self.height, self.t[i], self.x[i], self.y[i], self.p[i], validate=False
        )

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def select(self, mask) -> "EventStream":
        return self[np.asarray(mask, dtype=bool)]

    def time_slice(self, t_lo_us: int, t_hi_us: int) -> "EventStream":
        """Events with ``t_lo_us <= t < t_hi_us``."""
        lo, hi = np.searchsorted(self.t, [t_lo_us, t_hi_us], side="left")
        return self[lo:hi]

    def tie_order(self) -> np.ndarray:
        """Permutation putting events in (t, y, x, polarity) order."""
        return np.lexsort((self.p, self.x, self.y, self.t))

    @staticmethod
    def merge(*streams: "EventStream") -> "EventStream":
        """Merge streams on one sensor, ordering ties by (y, x, polarity)."""
        if not streams:
            raise ValueError("nothing to merge")
        w, h = streams[0].width, streams[0].height
        if any((s.width, s.height) != (w, h) for s in streams):
            raise ValueError("sensor sizes differ")
        cat = [np.concatenate([getattr(s, k) for s in streams]) for k in ("t", "x", "y", "p")]
        order = np.lexsort((cat[3], cat[1], cat[2], cat[0]))
        return EventStream(w, h, *(c[order] for c in cat), validate=False)


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def sniff_format(data: bytes) -> str:
    return "binary" if data[:4] == MAGIC else "csv"


def read_events(source: Source, format: str | None = None) -> EventStream:
    """Parse an event stream from bytes, a path or a binary file object.

    ``format`` is ``"csv"`` or ``"binary"``; ``None`` sniffs the magic bytes.
    """
    data = _read_bytes(source)
    fmt = format or sniff_format(data)
    if fmt == "binary":
        return _read_binary(data)
    if fmt == "csv":
        return _read_csv(data)
    raise ValueError(f"unknown event format {fmt!r}")


def _read_binary(data: bytes) -> EventStream:
    if len(data) < _BIN_HEADER.size:
        raise EventFormatError("truncated header", offset=len(data))
    magic, width, height, count = _BIN_HEADER.unpack_from(data)
    if magic != MAGIC:
        raise EventFormatError("bad magic", offset=0)
    body = len(data) - _BIN_HEADER.size
    expected = count * RECORD_DTYPE.itemsize
    if body < expected:
        whole = body // RECORD_DTYPE.itemsize
        raise EventFormatError(
            f"truncated record {whole} of {count}",
            offset=_BIN_HEADER.size + whole * RECORD_DTYPE.itemsize,
        )
    if body > expected:
        raise EventFormatError("trailing bytes after records", offset=_BIN_HEADER.size + expected)
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=_BIN_HEADER.size)
    badp = rec["p"] > 1
    if badp.any():
        i = int(np.argmax(badp))
        raise EventFormatError(
            f"polarity byte {rec['p'][i]} not in {{0,1}}",
            offset=_BIN_HEADER.size + i * RECORD_DTYPE.itemsize + 12,
        )
    if (rec["t"] > np.iinfo(np.int64).max).any():
        i = int(np.argmax(rec["t"] > np.iinfo(np.int64).max))
        raise EventFormatError("timestamp overflow", offset=_BIN_HEADER.size + i * 16)
    p = np.where(rec["p"] == 1, 1, -1).astype(np.int8)
    return EventStream(width, height, rec["t"].astype(np.int64), rec["x"], rec["y"], p)


def _read_csv(data: bytes) -> EventStream:
    lines = data.splitlines(keepends=True)
    if not lines:
        raise EventFormatError("missing header", offset=0, line=1)
    m = _CSV_HEADER_RE.match(lines[0].strip())
    if not m:
        raise EventFormatError("missing or malformed evnoise-events header", offset=0, line=1)
    width, height = int(m.group(1)), int(m.group(2))
    rows = []
    offset = len(lines[0])
    for lineno, raw in enumerate(lines[1:], start=2):
        s = raw.strip()
        if s and not s.startswith(b"#") and s != b"t,x,y,p":
            parts = s.split(b",")
            try:
                if len(parts) != 4:
                    raise ValueError
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise EventFormatError(
                    f"malformed record {s[:40]!r}", offset=offset, line=lineno
                ) from None
            if p not in (0, 1):
                raise EventFormatError(f"polarity {p} not in {{0,1}}", offset=offset, line=lineno)
            rows.append((t, x, y, p))
        offset += len(raw)
    if rows:
        arr = np.array(rows, dtype=np.int64)
        t, x, y, p = arr.T
        p = np.where(p == 1, 1, -1)
    else:
        t = x = y = p = ()
    return EventStream(width, height, t, x, y, p)


def write_events(stream: EventStream, format: str = "binary") -> bytes:
    """Serialize ``stream``; the result parses back to an identical stream."""
    if format == "binary":
        rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
        rec["t"] = stream.t
        rec["x"] = stream.x
        rec["y"] = stream.y
        rec["p"] = stream.p > 0
        header = _BIN_HEADER.pack(MAGIC, stream.width, stream.height, len(stream))
        return header + rec.tobytes()
    if format == "csv":
        buf = io.StringIO()
        buf.write(CSV_HEADER.format(w=stream.width, h=stream.height) + "\n")
        if len(stream):
            cols = np.column_stack([stream.t, stream.x, stream.y, (stream.p > 0).astype(np.int64)])
            np.savetxt(buf, cols, fmt="%d", delimiter=",")
        return buf.getvalue().encode("ascii")
    raise ValueError(f"unknown event format {format!r}")


def load_events(path) -> EventStream:
    return read_events(path)


def save_events(stream: EventStream, path, format: str | None = None) -> None:
    if format is None:
        format = "csv" if str(path).lower().endswith(".csv") else "binary"
    with open(path, "wb") as fh:
        fh.write(write_events(stream, format))


# ---------------------------------------------------------------------------
# Images

PHOTON_COUNT = "photon-count"
GRAY_LEVEL = "gray-level"


@dataclass(frozen=True, eq=False)
class IntensityImage:
    """Per-pixel intensity, either mean photon counts or display gray levels.

    ``maxval`` only matters for gray-level images (255 or 65535).
    """

    values: np.ndarray
    unit: str = PHOTON_COUNT
    maxval: int = 255

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("image must be 2-D")
        if self.unit not in (PHOTON_COUNT, GRAY_LEVEL):
            raise ValueError(f"unit must be {PHOTON_COUNT!r} or {GRAY_LEVEL!r}")
        if not np.all(np.isfinite(v)) or (v < 0).any():
            raise ValueError("image values must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class CountImage:
    """Two-channel event counts accumulated over ``window`` seconds.

    ``binning`` is the number of sensor pixels summed into each output pixel
    (4 after a 2x2 bin). ``valid`` marks pixels whose counts are usable;
    masked-out pixels carry ``False``.
    """

    pos: np.ndarray
    neg: np.ndarray
    window: float
    binning: int = 1
    valid: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pos = np.array(self.pos, dtype=np.int64)
        neg = np.array(self.neg, dtype=np.int64)
        if pos.ndim != 2 or pos.shape != neg.shape:
            raise ValueError("count channels must be 2-D with identical shapes")
        if (pos < 0).any() or (neg < 0).any():
            raise ValueError("counts must be non-negative")
        if not self.window > 0:
            raise ValueError("window must be positive")
        valid = np.ones(pos.shape, bool) if self.valid is None else np.array(self.valid, bool)
        if valid.shape != pos.shape:
            raise ValueError("valid mask shape mismatch")
        for a in (pos, neg, valid):
            a.setflags(write=False)
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "neg", neg)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.pos.shape[0]

    @property
    def width(self) -> int:
        return self.pos.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pos.shape
