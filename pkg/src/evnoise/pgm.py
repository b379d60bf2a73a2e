"""Binary portable graymap (P5) reading and writing, 8- and 16-bit."""

from __future__ import annotations

import os
import re

import numpy as np

from .events import GRAY_LEVEL, PHOTON_COUNT, CountImage, IntensityImage

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


class GraymapError(ValueError):
    pass


def encode_pgm(array, maxval: int | None = None) -> bytes:
    """Encode a 2-D array of integer gray levels as a P5 graymap.

    ``maxval`` defaults to 255 when the data fits in a byte, else 65535.
    Samples are big-endian for 16-bit data.
    """
    a = np.asarray(array)
    if a.ndim != 2:
        raise GraymapError("graymap data must be 2-D")
    if a.size and not np.array_equal(a, np.round(a)):
        raise GraymapError("graymap samples must be integers")
    a = a.astype(np.int64)
    top = int(a.max()) if a.size else 0
    if maxval is None:
        maxval = 255 if top <= 255 else 65535
    if not 0 < maxval <= 65535:
        raise GraymapError(f"maxval {maxval} out of range")
    if a.size and (a.min() < 0 or top > maxval):
        raise GraymapError(f"samples outside [0, {maxval}]")
    h, w = a.shape
    header = b"P5\n%d %d\n%d\n" % (w, h, maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    return header + a.astype(dtype).tobytes()


def decode_pgm(data: bytes) -> tuple[np.ndarray, int]:
    """Return ``(array, maxval)`` for P5 graymap bytes."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise GraymapError("truncated graymap header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise GraymapError(f"not a binary graymap (magic {tokens[0][:8]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise GraymapError("non-integer graymap header field") from None
    if not 0 < maxval <= 65535 or w <= 0 or h <= 0:
        raise GraymapError("invalid graymap header values")
    pos += 1  # single whitespace byte before the raster
    dtype = ">u1" if maxval < 256 else ">u2"
    need = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise GraymapError("truncated graymap raster")
    a = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return a.astype(np.int64), maxval


def read_pgm(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def write_pgm(path, array, maxval: int | None = None) -> None:
    data = encode_pgm(array, maxval)
    with open(path, "wb") as fh:
        fh.write(data)


def write_image(image: IntensityImage) -> bytes:
    """Encode a gray-level image. Photon-count images must be display-mapped first."""
    if image.unit == PHOTON_COUNT:
        raise GraymapError("photon-count image needs a display mapping before writing")
    return encode_pgm(image.values, image.maxval)


def read_image(source) -> IntensityImage:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            source = fh.read()
    a, maxval = decode_pgm(source)
    return IntensityImage(a, unit=GRAY_LEVEL, maxval=maxval)


def write_count_channel(counts: CountImage, channel: str) -> bytes:
    """Encode one count channel as a 16-bit graymap (always maxval 65535)."""
    a = {"pos": counts.pos, "neg": counts.neg}[channel]
    if a.size and a.max() > 65535:
        raise GraymapError("count exceeds 16-bit range")
    return encode_pgm(a, 65535)
