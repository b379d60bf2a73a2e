"""
Synthetic noise events for static scenes.

Random numbers come from Philox generators keyed by ``(seed, purpose, tile)``
where tiles are fixed row bands of the image, so results do not depend on
how many workers process the tiles.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pgm
from .events import GRAY_LEVEL, PHOTON_COUNT, CountImage, EventStream, IntensityImage
from .noise_model import NEGATIVE_BINOMIAL, CameraParams, p_event

log = logging.getLogger(__name__)

TILE_ROWS = 16
EPS_FLOOR = 0.01

_COUNTS, _STREAM, _JITTER = 1, 2, 3


@dataclass(frozen=True)
class PixelVariability:
    """Fixed-pattern jitter of the contrast thresholds, frozen by ``seed``."""

    eps_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.eps_sigma < 0:
            raise ValueError("eps_sigma must be >= 0")

    def thresholds(self, params: CameraParams, shape) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel (positive, negative) thresholds, clamped to >= 0.01."""
        if self.eps_sigma == 0:
            return np.full(shape, params.eps_pos), np.full(shape, params.eps_neg)
        rng = _rng(self.seed, _JITTER, 0)
        jit = rng.standard_normal((2, *shape)) * self.eps_sigma
        return (
            np.maximum(params.eps_pos + jit[0], EPS_FLOOR),
            np.maximum(params.eps_neg + jit[1], EPS_FLOOR),
        )


NO_VARIABILITY = PixelVariability()


def _rng(seed, purpose, tile) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), purpose, tile])
    return np.random.Generator(np.random.Philox(ss))


def _tiles(height):
    return [(i, r, min(r + TILE_ROWS, height)) for i, r in enumerate(range(0, height, TILE_ROWS))]


def _map_tiles(fn, height, workers):
    tiles = _tiles(height)
    if workers and workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda a: fn(*a), tiles))
    return [fn(*t) for t in tiles]


def _check_scene(scene: IntensityImage, params: CameraParams) -> np.ndarray:
    if scene.unit != PHOTON_COUNT:
        raise ValueError("scene must be in photon-count units; map gray levels first")
    lam = scene.values
    if lam.size and lam.min() < params.lambda_min:
        raise ValueError(f"scene values must be >= lambda_min ({params.lambda_min})")
    return lam


def _draw(rng, mean, lam, params: CameraParams, fallback: list) -> np.ndarray:
    """Poisson or gamma-Poisson draws with the given means."""
    if params.dispersion.kind != NEGATIVE_BINOMIAL:
        return rng.poisson(mean)
    var = params.dispersion.variance(lam)
    over = var > mean
    fallback.append(int(np.count_nonzero(~over)))
    # r = mu^2 / (var - mu); gamma(shape=r, scale=mu/r) has mean mu, variance mu^2/r
    excess = np.where(over, var - mean, 1.0)
    shape = np.where(over, mean * mean / excess, 1.0)
    scale = np.where(over, excess / np.maximum(mean, 1e-300), 0.0)
    rate = np.where(over, rng.gamma(np.maximum(shape, 1e-300), 1.0) * scale, mean)
    return rng.poisson(rate)


def sample_counts(
    scene: IntensityImage,
    params: CameraParams,
    window: float,
    variability: PixelVariability = NO_VARIABILITY,
    seed: int = 0,
    *,
    workers: int = 1,
    stats: dict | None = None,
) -> CountImage:
    """Draw two-polarity event counts for a static scene over ``window`` seconds.

    Negative-binomial pixels whose tabulated variance does not exceed the mean
    fall back to Poisson; the number of such pixel draws is added to
    ``stats["nb_fallback"]`` when ``stats`` is given.
    """
    if not window > 0:
        raise ValueError("window must be > 0")
    lam = _check_scene(scene, params)
    eps_pos, eps_neg = variability.thresholds(params, lam.shape)
    scale = window * params.n_trials

    def tile(i, r0, r1):
        rng = _rng(seed, _COUNTS, i)
        fallback = []
        sl = lam[r0:r1]
        mean_pos = scale * p_event(sl, eps_pos[r0:r1], params.b_pr)
        mean_neg = scale * p_event(sl, eps_neg[r0:r1], params.b_pr)
        pos = _draw(rng, mean_pos, sl, params, fallback)
        neg = _draw(rng, mean_neg, sl, params, fallback)
        return pos, neg, sum(fallback)

    parts = _map_tiles(tile, lam.shape[0], workers)
    n_fallback = sum(p[2] for p in parts)
    if n_fallback:
        log.warning("negative-binomial variance <= mean at %d pixel draws; used Poisson", n_fallback)
    if stats is not None:
        stats["nb_fallback"] = stats.get("nb_fallback", 0) + n_fallback
    if not parts:
        empty = np.zeros(lam.shape, np.int64)
        return CountImage(empty, empty, window)
    return CountImage(
        np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), window
    )


def _refractory_keep(pix: np.ndarray, t: np.ndarray, refractory: int) -> np.ndarray:
    """Keep-mask for events sorted by (pixel, t): drop any event closer than
    ``refractory`` to the previous kept event of the same pixel."""
    n = len(t)
    keep = np.ones(n, bool)
    if n < 2 or refractory <= 0:
        return keep
    same = pix[1:] == pix[:-1]
    close = same & (np.diff(t) < refractory)
    # An event far enough from its predecessor is also far from any earlier
    # kept event, so only the close ones need the sequential check.
    for i in np.flatnonzero(close) + 1:
        j = i - 1
        while not keep[j]:
            j -= 1
        keep[i] = t[i] - t[j] >= refractory
    return keep


def sample_stream(
    scene: IntensityImage,
    params: CameraParams,
    duration: float,
    variability: PixelVariability = NO_VARIABILITY,
    seed: int = 0,
    *,
    t0_us: int = 0,
    workers: int = 1,
    stats: dict | None = None,
) -> EventStream:
    """Timestamped noise events for a static scene.

    Each pixel and polarity fires as a Poisson process of rate
    ``n_trials * p_e``. Events at one pixel closer than ``refractory_us`` to
    the previous surviving event (either polarity) are dropped.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    lam = _check_scene(scene, params)
    h, w = lam.shape
    dur_us = int(round(duration * 1e6))
    if dur_us == 0:
        return EventStream.empty(w, h)
    eps_pos, eps_neg = variability.thresholds(params, lam.shape)
    ref = int(np.ceil(params.refractory_us))
    load = params.refractory_load(lam)
    if load >= 0.1:
        log.warning("refractory load %.3g >= 0.1; thinning will bias counts", load)

    def tile(i, r0, r1):
        rng = _rng(seed, _STREAM, i)
        fallback = []
        sl = lam[r0:r1]
        pix_idx = np.arange(r0 * w, r1 * w)
        cols = []
        for pol, eps in ((1, eps_pos), (-1, eps_neg)):
            mean = duration * params.n_trials * p_event(sl, eps[r0:r1], params.b_pr)
            k = _draw(rng, mean, sl, params, fallback).ravel()
            pix = np.repeat(pix_idx, k)
            t = rng.integers(0, dur_us, size=pix.size)
            cols.append((pix, t, np.full(pix.size, pol, np.int8)))
        pix, t, p = (np.concatenate(c) for c in zip(*cols))
        order = np.lexsort((p, t, pix))
        pix, t, p = pix[order], t[order], p[order]
        keep = _refractory_keep(pix, t, ref)
        return pix[keep], t[keep], p[keep], sum(fallback), int(np.count_nonzero(~keep))

    parts = _map_tiles(tile, h, workers)
    if stats is not None:
        stats["nb_fallback"] = stats.get("nb_fallback", 0) + sum(p[3] for p in parts)
        stats["refractory_dropped"] = stats.get("refractory_dropped", 0) + sum(p[4] for p in parts)
    pix = np.concatenate([p[0] for p in parts])
    t = np.concatenate([p[1] for p in parts]) + int(t0_us)
    p = np.concatenate([p[2] for p in parts])
    y, x = np.divmod(pix, w)
    order = np.lexsort((p, x, y, t))
    return EventStream(w, h, t[order], x[order], y[order], p[order], validate=False)


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class ManifestEntry:
    scene: str
    pos: str
    neg: str
    seed: int
    window: float

    def to_line(self) -> str:
        return f"scene={self.scene} pos={self.pos} neg={self.neg} seed={self.seed} window={self.window!r}"

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        kv = dict(tok.split("=", 1) for tok in line.split())
        try:
            return cls(kv["scene"], kv["pos"], kv["neg"], int(kv["seed"]), float(kv["window"]))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"bad manifest line {line!r}") from exc


def read_manifest(path) -> list[ManifestEntry]:
    with open(path) as fh:
        return [ManifestEntry.from_line(s) for s in fh.read().splitlines() if s.strip()]


def _store_scene(scene: IntensityImage, gray_map):
    """Quantize a photon-count scene to its on-disk graymap and the lambda it represents."""
    if gray_map is None:
        q = np.clip(np.round(scene.values), 0, 65535).astype(np.int64)
        return pgm.encode_pgm(q, 65535)
    g = gray_map.to_gray(scene.values)
    return pgm.encode_pgm(g, gray_map.max_gray)


def _scene_lambda(data: bytes, params: CameraParams, gray_map) -> IntensityImage:
    a, _ = pgm.decode_pgm(data)
    lam = a.astype(np.float64) if gray_map is None else gray_map.to_lambda(a)
    return IntensityImage(np.maximum(lam, params.lambda_min), PHOTON_COUNT)


def _write_counts(entry: ManifestEntry, root: Path, scene_bytes: bytes, params, variability, gray_map):
    scene = _scene_lambda(scene_bytes, params, gray_map)
    counts = sample_counts(scene, params, entry.window, variability, entry.seed)
    (root / entry.pos).write_bytes(pgm.write_count_channel(counts, "pos"))
    (root / entry.neg).write_bytes(pgm.write_count_channel(counts, "neg"))


def generate_dataset(
    scenes,
    params: CameraParams,
    window: float,
    variability: PixelVariability,
    seed: int,
    out_dir,
    *,
    gray_map=None,
    names=None,
) -> list[ManifestEntry]:
    """Write (scene, positive count, negative count) graymaps and ``manifest.txt``.

    Scenes are stored quantized (through ``gray_map`` when given, else as
    rounded 16-bit photon counts) and counts are sampled from the stored
    scene, so :func:`replay_manifest` regenerates identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = list(scenes)
    for s in scenes:
        if s.unit != PHOTON_COUNT:
            raise ValueError("dataset scenes must be in photon-count units")
    names = list(names) if names is not None else [f"sample{i:05d}" for i in range(len(scenes))]
    children = np.random.SeedSequence(int(seed)).spawn(len(scenes))
    entries = []
    for scene, name, child in zip(scenes, names, children):
        entry = ManifestEntry(
            f"{name}_scene.pgm",
            f"{name}_pos.pgm",
            f"{name}_neg.pgm",
            int(child.generate_state(1, np.uint64)[0]),
            float(window),
        )
        data = _store_scene(scene, gray_map)
        (out / entry.scene).write_bytes(data)
        _write_counts(entry, out, data, params, variability, gray_map)
        entries.append(entry)
    with open(out / "manifest.txt", "w") as fh:
        fh.writelines(e.to_line() + "\n" for e in entries)
    return entries


def replay_manifest(manifest_path, params: CameraParams, variability: PixelVariability, *, gray_map=None):
    """Regenerate the count graymaps listed in a manifest from its scene files."""
    root = Path(os.path.dirname(os.path.abspath(manifest_path)))
    entries = read_manifest(manifest_path)
    for e in entries:
        _write_counts(e, root, (root / e.scene).read_bytes(), params, variability, gray_map)
    return entries


def gray_scene(image: IntensityImage, gray_map, params: CameraParams) -> IntensityImage:
    """Convert a gray-level scene to photon counts, clamped to ``lambda_min``."""
    if image.unit != GRAY_LEVEL:
        raise ValueError("expected a gray-level image")
    lam = gray_map.to_lambda(image.values) if gray_map is not None else image.values
    return IntensityImage(np.maximum(lam, params.lambda_min), PHOTON_COUNT)
