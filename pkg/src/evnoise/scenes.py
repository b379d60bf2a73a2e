"""
Synthetic scenes and labeled event streams for tests and demos.

The labeled streams mix noise events with "signal" bursts emitted where a
moving object's edge crosses a pixel, so every event's origin is known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import GrayToLambdaMap
from .events import GRAY_LEVEL, PHOTON_COUNT, EventStream, IntensityImage
from .noise_model import CameraParams
from .synthesis import sample_stream


def monitor_gray_map(lam_lo: float = 50.0, lam_hi: float = 5000.0, gamma: float = 2.2) -> GrayToLambdaMap:
    """256-level display response ``lam_lo + (lam_hi - lam_lo) * (g/255)**gamma``."""
    g = np.arange(256, dtype=np.float64)
    return GrayToLambdaMap(g, lam_lo + (lam_hi - lam_lo) * (g / 255.0) ** gamma)


def gradient_patches(shape=(128, 128), seed: int = 0) -> IntensityImage:
    """8-bit test card: a smooth diagonal gradient with constant rectangles on top."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    g = 30 + 200 * (0.6 * xx / max(w - 1, 1) + 0.4 * yy / max(h - 1, 1))
    rng = np.random.default_rng(seed)
    for _ in range(6):
        ph, pw = rng.integers(h // 8, h // 3), rng.integers(w // 8, w // 3)
        y0, x0 = rng.integers(0, h - ph), rng.integers(0, w - pw)
        g[y0 : y0 + ph, x0 : x0 + pw] = rng.integers(0, 256)
    return IntensityImage(np.clip(np.round(g), 0, 255), GRAY_LEVEL, 255)


def two_region(shape=(64, 64), lam_a: float = 100.0, lam_b: float = 800.0) -> IntensityImage:
    """Left half ``lam_a``, right half ``lam_b``, photon-count units."""
    v = np.full(shape, lam_a)
    v[:, shape[1] // 2 :] = lam_b
    return IntensityImage(v, PHOTON_COUNT)


@dataclass
class LabeledStream:
    stream: EventStream
    is_signal: np.ndarray
    support: np.ndarray | None = None


def _burst(rng, t_us, x, y, pol, per_crossing, jitter_us):
    n = len(t_us)
    t = np.repeat(t_us, per_crossing) + rng.integers(-jitter_us, jitter_us + 1, n * per_crossing)
    return (
        np.maximum(t, 0),
        np.repeat(x, per_crossing),
        np.repeat(y, per_crossing),
        np.repeat(pol, per_crossing),
    )


def _combine(width, height, sig, noise: EventStream, support=None) -> LabeledStream:
    t = np.concatenate([sig[0], noise.t])
    x = np.concatenate([sig[1], noise.x])
    y = np.concatenate([sig[2], noise.y])
    p = np.concatenate([sig[3], noise.p]).astype(np.int8)
    lab = np.concatenate([np.ones(len(sig[0]), bool), np.zeros(len(noise), bool)])
    order = np.lexsort((p, x, y, t))
    stream = EventStream(width, height, t[order], x[order], y[order], p[order])
    return LabeledStream(stream, lab[order], support)


def moving_edge(
    shape=(64, 64),
    speed_px_per_ms: float = 1.0,
    per_crossing: int = 4,
    jitter_us: int = 100,
    rate_ratio: float = 100.0,
    seed: int = 0,
) -> LabeledStream:
    """A vertical edge sweeping left to right once, over uniform background noise.

    Each column emits ``per_crossing`` positive events per pixel when the edge
    passes. Background noise is Poisson with a per-pixel rate equal to the
    edge pixels' average signal rate over the sweep divided by ``rate_ratio``.
    """
    h, w = shape
    rng = np.random.default_rng(seed)
    col_us = 1000.0 / speed_px_per_ms
    duration_us = int(w * col_us)
    yy, xx = np.mgrid[0:h, 0:w]
    t_cross = ((xx + 0.5) * col_us).astype(np.int64).ravel()
    sig = _burst(rng, t_cross, xx.ravel(), yy.ravel(), np.ones(h * w, np.int8), per_crossing, jitter_us)
    noise_rate = per_crossing / (duration_us * 1e-6) / rate_ratio
    k = rng.poisson(noise_rate * duration_us * 1e-6, size=h * w)
    pix = np.repeat(np.arange(h * w), k)
    nt = rng.integers(0, duration_us, pix.size)
    ny, nx = np.divmod(pix, w)
    npol = np.where(rng.random(pix.size) < 0.5, 1, -1)
    order = np.argsort(nt, kind="stable")
    noise = EventStream(w, h, nt[order], nx[order], ny[order], npol[order])
    return _combine(w, h, sig, noise)


def moving_disc(
    background: IntensityImage,
    params: CameraParams,
    duration: float,
    *,
    radius: float = 10.0,
    start=(16.0, 32.0),
    end=(48.0, 32.0),
    t_move=(0.3, 0.31),
    per_crossing: int = 4,
    jitter_us: int = 50,
    disc_lambda: float = 2000.0,
    seed: int = 0,
    static_seed: int | None = None,
) -> LabeledStream:
    """A bright disc sliding over a static background between two positions.

    The disc rests at ``start`` before ``t_move[0]``, moves linearly to ``end``
    by ``t_move[1]`` and rests there afterwards (all in seconds). Noise comes
    from the background scene where the disc is absent and from a uniform
    ``disc_lambda`` scene where it is present; every edge crossing of a pixel
    emits a burst of signal events (positive on entry, negative on exit).
    ``support`` marks pixels the disc covers at any time.
    """
    h, w = background.shape
    rng = np.random.default_rng(seed)
    dur_us = int(round(duration * 1e6))
    a_us, b_us = (int(round(v * 1e6)) for v in t_move)
    step = 10
    ts = np.arange(0, dur_us + step, step)
    frac = np.clip((ts - a_us) / max(b_us - a_us, 1), 0.0, 1.0)
    cx = start[0] + frac * (end[0] - start[0])
    cy = start[1] + frac * (end[1] - start[1])
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy.ravel(), xx.ravel()

    # coverage changes only while moving; sample that interval finely
    moving = np.flatnonzero((ts >= a_us - step) & (ts <= b_us + step))
    cov = (xx[None, :] - cx[moving, None]) ** 2 + (yy[None, :] - cy[moving, None]) ** 2 <= radius**2
    covered_at_start = (xx - start[0]) ** 2 + (yy - start[1]) ** 2 <= radius**2
    support = cov.any(axis=0) | covered_at_start

    change = np.diff(cov.astype(np.int8), axis=0)
    ti, pi = np.nonzero(change)
    t_edge = ts[moving][ti + 1]
    pol = change[ti, pi].astype(np.int8)
    sig = _burst(rng, t_edge, xx[pi], yy[pi], pol, per_crossing, jitter_us)

    bg = sample_stream(background, params, duration, seed=seed if static_seed is None else static_seed)
    disc_scene = IntensityImage(np.full((h, w), float(disc_lambda)), PHOTON_COUNT)
    fg = sample_stream(disc_scene, params, duration, seed=seed + 7919)

    def inside(stream):
        t = np.clip(stream.t, 0, dur_us)
        f = np.clip((t - a_us) / max(b_us - a_us, 1), 0.0, 1.0)
        px = start[0] + f * (end[0] - start[0])
        py = start[1] + f * (end[1] - start[1])
        return (stream.x - px) ** 2 + (stream.y - py) ** 2 <= radius**2

    noise = EventStream.merge(bg.select(~inside(bg)), fg.select(inside(fg)))
    return _combine(w, h, sig, noise, support.reshape(h, w))
