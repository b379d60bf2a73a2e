"""
Signal/noise separation with a background-activity filter, motion masks
and static/dynamic compositing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, uniform_filter

from . import pgm
from .events import CountImage, EventStream, IntensityImage
from .reconstruction import aggregate

_NEVER = -(2**62)


@dataclass(frozen=True)
class BafConfig:
    dt_us: int = 1000
    radius: int = 1

    def __post_init__(self):
        if not self.dt_us > 0:
            raise ValueError("dt_us must be > 0")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")


class BafFilter:
    """Stateful background-activity filter.

    Keeps, per pixel, the timestamp of the latest event in its neighborhood
    (same pixel excluded). An event is signal when that timestamp is at most
    ``dt_us`` old. State persists across :meth:`classify` calls so a long
    stream can be fed in chunks.
    """

    def __init__(self, width: int, height: int, cfg: BafConfig = BafConfig()):
        self.width, self.height, self.cfg = width, height, cfg
        self._support = [_NEVER] * (width * height)
        self._neighbors: dict[int, tuple] = {}

    def _around(self, idx: int) -> tuple:
        nb = self._neighbors.get(idx)
        if nb is None:
            y, x = divmod(idx, self.width)
            r = self.cfg.radius
            nb = tuple(
                yy * self.width + xx
                for yy in range(max(0, y - r), min(self.height, y + r + 1))
                for xx in range(max(0, x - r), min(self.width, x + r + 1))
                if (yy, xx) != (y, x)
            )
            self._neighbors[idx] = nb
        return nb

    def classify(self, stream: EventStream) -> np.ndarray:
        """Boolean signal labels, in the stream's own order.

        Simultaneous events are processed in (t, y, x, polarity) order.
        """
        if (stream.width, stream.height) != (self.width, self.height):
            raise ValueError("stream sensor size does not match the filter")
        order = stream.tie_order()
        ts = stream.t[order].tolist()
        idxs = (stream.y[order] * self.width + stream.x[order]).tolist()
        support = self._support
        dt = self.cfg.dt_us
        around = self._around
        out = [False] * len(ts)
        for i, (t, idx) in enumerate(zip(ts, idxs)):
            out[i] = t - support[idx] <= dt
            for j in around(idx):
                support[j] = t
        labels = np.empty(len(ts), bool)
        labels[order] = out
        return labels


def baf_labels(stream: EventStream, cfg: BafConfig = BafConfig()) -> np.ndarray:
    return BafFilter(stream.width, stream.height, cfg).classify(stream)


def baf_split(stream: EventStream, cfg: BafConfig = BafConfig()) -> tuple[EventStream, EventStream]:
    """Partition ``stream`` into (signal, noise), each keeping input order."""
    labels = baf_labels(stream, cfg)
    return stream.select(labels), stream.select(~labels)


@dataclass(frozen=True, eq=False)
class MotionMask:
    mask: np.ndarray
    t_start: float = 0.0
    window: float = 0.0

    @property
    def shape(self):
        return self.mask.shape

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


def _dilate(mask, radius):
    if radius <= 0 or not mask.any():
        return mask
    return binary_dilation(mask, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))


def motion_mask(
    signal: EventStream,
    t_start: float,
    window: float,
    count_threshold: int = 3,
    dilation_radius: int = 2,
) -> MotionMask:
    """Pixels with at least ``count_threshold`` signal events in the window, dilated."""
    c = aggregate(signal, t_start, window)
    m = (c.pos + c.neg) >= count_threshold
    return MotionMask(_dilate(m, dilation_radius), t_start, window)


def motion_mask_frames(
    signal: EventStream,
    t_start: float,
    window: float,
    frame: float,
    count_threshold: int = 3,
    dilation_radius: int = 2,
) -> MotionMask:
    """Union of per-frame motion masks over consecutive ``frame``-second slices."""
    if not frame > 0:
        raise ValueError("frame must be > 0")
    union = np.zeros(signal.shape, bool)
    n = max(1, int(np.ceil(window / frame - 1e-9)))
    for i in range(n):
        start = t_start + i * frame
        length = min(frame, t_start + window - start)
        union |= motion_mask(signal, start, length, count_threshold, 0).mask
    return MotionMask(_dilate(union, dilation_radius), t_start, window)


def stitch(
    static_img: IntensityImage,
    dynamic_img: IntensityImage,
    mask: MotionMask,
    feather: bool = False,
) -> IntensityImage:
    """Dynamic pixels where the mask is set, static elsewhere.

    ``feather`` blends across a one-pixel band using a 3x3 box-filtered mask.
    """
    if static_img.shape != dynamic_img.shape or static_img.shape != mask.shape:
        raise ValueError("image and mask dimensions differ")
    if static_img.unit != dynamic_img.unit:
        raise ValueError("images have different units")
    if feather:
        alpha = uniform_filter(mask.mask.astype(np.float64), size=3, mode="nearest")
        v = alpha * dynamic_img.values + (1 - alpha) * static_img.values
        if static_img.unit != "photon-count":
            v = np.round(v)
    else:
        v = np.where(mask.mask, dynamic_img.values, static_img.values)
    return IntensityImage(v, static_img.unit, max(static_img.maxval, dynamic_img.maxval))


def masked_aggregate(noise: EventStream, mask: MotionMask, t_start: float, window: float) -> CountImage:
    """Counts at pixels outside the mask; masked pixels are zero and invalid."""
    if mask.shape != noise.shape:
        raise ValueError("mask and stream dimensions differ")
    c = aggregate(noise, t_start, window)
    keep = ~mask.mask
    return CountImage(np.where(keep, c.pos, 0), np.where(keep, c.neg, 0), window, valid=keep)


def write_mask(mask, path=None) -> bytes:
    m = mask.mask if isinstance(mask, MotionMask) else np.asarray(mask, bool)
    data = pgm.encode_pgm(np.where(m, 255, 0), 255)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def read_mask(path) -> MotionMask:
    a, maxval = pgm.read_pgm(path)
    return MotionMask(a > maxval // 2)
