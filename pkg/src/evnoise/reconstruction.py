"""
Static-intensity recovery from two-polarity noise-event counts.

Per pixel, the mean photon count is the grid point maximizing the joint
likelihood of the positive and negative counts. Because the rate curve
rises and then falls when ``b_pr > 0``, one count can match two
intensities; pixels with a competing likelihood peak are flagged as
ambiguous. An optional refinement adds total-variation smoothing on
log-intensity.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from .events import GRAY_LEVEL, PHOTON_COUNT, CountImage, EventStream, IntensityImage
from .noise_model import NEGATIVE_BINOMIAL, CameraParams, dp_event_dlam, p_event

log = logging.getLogger(__name__)

_CHUNK = 4096


@dataclass(frozen=True)
class ReconstructionConfig:
    """Settings for :func:`reconstruct`.

    ``window`` defaults to the count image's window. ``lambda_grid`` overrides
    the ``grid_size`` log-spaced points over ``lambda_range``.
    """

    window: float | None = None
    lambda_grid: tuple | None = None
    lambda_range: tuple = (1.0, 1e4)
    grid_size: int = 512
    bin2x2: bool = True
    smoothness_weight: float = 0.0
    max_refine_iters: int = 200
    tie_break: str = "smallest-lambda"
    polarity: str = "both"
    likelihood: str = "poisson"
    ambiguity_threshold: float = 2.0
    prior_lambda: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.tie_break not in ("smallest-lambda", "highest-prior"):
            raise ValueError(f"unknown tie_break {self.tie_break!r}")
        if self.polarity not in ("both", "pos", "neg"):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.likelihood not in ("poisson", NEGATIVE_BINOMIAL):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.smoothness_weight < 0:
            raise ValueError("smoothness_weight must be >= 0")
        if self.max_refine_iters < 1:
            raise ValueError("max_refine_iters must be positive")
        grid = self.grid()
        if grid.size == 0 or grid[0] <= 0 or (np.diff(grid) <= 0).any():
            raise ValueError("lambda grid must be non-empty, positive and ascending")

    def grid(self) -> np.ndarray:
        if self.lambda_grid is not None:
            return np.asarray(self.lambda_grid, dtype=np.float64)
        lo, hi = self.lambda_range
        return np.geomspace(lo, hi, self.grid_size)


# ---------------------------------------------------------------------------
# Counting


def aggregate(stream: EventStream, t_start: float, window: float) -> CountImage:
    """Per-pixel event counts for ``t_start <= t < t_start + window`` (seconds)."""
    if not window > 0:
        raise ValueError("window must be > 0")
    lo = int(round(t_start * 1e6))
    hi = int(round((t_start + window) * 1e6))
    part = stream.time_slice(lo, hi)
    size = stream.width * stream.height
    idx = part.y * stream.width + part.x
    pos = np.bincount(idx[part.p > 0], minlength=size).reshape(stream.shape)
    neg = np.bincount(idx[part.p < 0], minlength=size).reshape(stream.shape)
    return CountImage(pos, neg, window)


def bin2x2(counts: CountImage) -> CountImage:
    """Sum 2x2 blocks. An odd trailing row or column is dropped with a warning.

    A binned pixel is valid only if all four source pixels were.
    """
    h, w = counts.shape
    h2, w2 = h // 2, w // 2
    if h % 2 or w % 2:
        log.warning("odd count image %dx%d; dropping trailing row/column", w, h)

    def fold(a, op):
        a = a[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
        return op(a, axis=(1, 3))

    return CountImage(
        fold(counts.pos, np.sum),
        fold(counts.neg, np.sum),
        counts.window,
        binning=counts.binning * 4,
        valid=fold(counts.valid, np.all),
    )


def unbin(image: IntensityImage, shape, factor: int = 2) -> IntensityImage:
    """Nearest-neighbor upsampling back to ``shape``, replicating edges if needed."""
    v = np.repeat(np.repeat(image.values, factor, axis=0), factor, axis=1)
    h, w = shape
    v = np.pad(v, ((0, max(0, h - v.shape[0])), (0, max(0, w - v.shape[1]))), mode="edge")
    return IntensityImage(v[:h, :w], image.unit, image.maxval)


# ---------------------------------------------------------------------------
# Per-pixel maximum likelihood


class MLEstimate(NamedTuple):
    image: IntensityImage
    ambiguous: np.ndarray
    saturated: np.ndarray
    valid: np.ndarray


def expected_counts(grid, params: CameraParams, window: float, binning: int = 1):
    """Mean (positive, negative) counts on ``grid`` for one (possibly binned) pixel."""
    scale = window * params.n_trials * binning
    return scale * p_event(grid, params.eps_pos, params.b_pr), scale * p_event(
        grid, params.eps_neg, params.b_pr
    )


def _nb_shape(mu, var):
    """Negative-binomial size r from mean and variance; inf where not overdispersed."""
    return np.where(var > mu, mu * mu / np.maximum(var - mu, 1e-300), np.inf)


def _loglik_table(k, mu, r=None):
    """Log-likelihood of counts ``k`` (P,) against means ``mu`` (G,) -> (P, G)."""
    k = k[:, None].astype(np.float64)
    logmu = np.log(np.maximum(mu, 1e-300))
    pois = k * logmu[None, :] - mu[None, :]
    if r is None:
        return pois
    finite = np.isfinite(r)
    if not finite.any():
        return pois
    rr = np.where(finite, r, 1.0)[None, :]
    nb = (
        gammaln(k + rr)
        - gammaln(rr)
        + rr * np.log(rr / (rr + mu[None, :]))
        + k * (logmu[None, :] - np.log(rr + mu[None, :]))
    )
    return np.where(finite[None, :], nb, pois)


def invert_ml(counts: CountImage, params: CameraParams, config: ReconstructionConfig = ReconstructionConfig()):
    """Grid maximum-likelihood estimate of the mean photon count per pixel.

    The trial rate is scaled by ``counts.binning``. Pixels marked invalid in
    ``counts`` are not estimated; they receive the median valid estimate and
    ``valid=False`` in the result.
    """
    grid = config.grid()
    window = config.window if config.window is not None else counts.window
    mu_pos, mu_neg = expected_counts(grid, params, window, counts.binning)
    r_pos = r_neg = None
    if config.likelihood == NEGATIVE_BINOMIAL:
        if params.dispersion.kind != NEGATIVE_BINOMIAL:
            raise ValueError("negative-binomial likelihood needs a variance table in params")
        var = params.dispersion.variance(grid) * counts.binning
        r_pos, r_neg = _nb_shape(mu_pos, var), _nb_shape(mu_neg, var)
    use_pos = config.polarity in ("both", "pos")
    use_neg = config.polarity in ("both", "neg")

    valid = counts.valid
    kp = counts.pos[valid]
    kn = counts.neg[valid]
    n = kp.size
    if config.tie_break == "highest-prior":
        center = np.log(config.prior_lambda) if config.prior_lambda else np.log(grid).mean()
        prior_rank = -np.abs(np.log(grid) - center)
    else:
        prior_rank = None

    def chunk(lo):
        hi = min(lo + _CHUNK, n)
        ll = np.zeros((hi - lo, grid.size))
        if use_pos:
            ll += _loglik_table(kp[lo:hi], mu_pos, r_pos)
        if use_neg:
            ll += _loglik_table(kn[lo:hi], mu_neg, r_neg)
        best = ll.max(axis=1)
        tol = 1e-9 * np.maximum(np.abs(best), 1.0)
        tied = ll >= (best - tol)[:, None]
        if prior_rank is None:
            idx = np.argmax(tied, axis=1)
        else:
            idx = np.argmax(np.where(tied, prior_rank[None, :], -np.inf), axis=1)
        # local maxima; plateaus count once at their right end
        left = np.concatenate([np.ones((ll.shape[0], 1), bool), ll[:, 1:] >= ll[:, :-1]], axis=1)
        right = np.concatenate([ll[:, :-1] > ll[:, 1:], np.ones((ll.shape[0], 1), bool)], axis=1)
        peaks = np.where(left & right, ll, -np.inf)
        if grid.size > 1:
            top2 = -np.partition(-peaks, 1, axis=1)[:, :2]
            ambiguous = np.isfinite(top2[:, 1]) & (top2[:, 1] >= top2[:, 0] - config.ambiguity_threshold)
        else:
            ambiguous = np.zeros(hi - lo, bool)
        return idx, ambiguous

    starts = list(range(0, n, _CHUNK))
    if config.workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(s) for s in starts]
    idx = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    amb = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, bool)

    sat = np.zeros(n, bool)
    if use_pos:
        top = mu_pos.max()
        sat |= kp > top + 10 * np.sqrt(top)
    if use_neg:
        top = mu_neg.max()
        sat |= kn > top + 10 * np.sqrt(top)

    lam = np.empty(counts.shape)
    fill = float(np.median(grid[idx])) if n else float(np.exp(np.log(grid).mean()))
    lam.fill(fill)
    lam[valid] = grid[idx]
    ambiguous = np.zeros(counts.shape, bool)
    ambiguous[valid] = amb
    saturated = np.zeros(counts.shape, bool)
    saturated[valid] = sat
    return MLEstimate(IntensityImage(lam, PHOTON_COUNT), ambiguous, saturated, valid.copy())


# ---------------------------------------------------------------------------
# Total-variation refinement on log-intensity


def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px, py):
    """Negative adjoint of :func:`_grad`."""
    d = np.zeros_like(px)
    d[:, 0] = px[:, 0]
    d[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    d[:, -1] = -px[:, -2]
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] += -py[-2, :]
    return d


def total_variation(u) -> float:
    gx, gy = _grad(u)
    return float(np.sum(np.sqrt(gx * gx + gy * gy)))


def tv_prox(v, weight, n_iter=60):
    """argmin_u 0.5*||u - v||^2 + weight * TV(u), Chambolle's dual projection."""
    if weight <= 0 or min(v.shape) < 2:
        return v.copy()
    px = np.zeros_like(v)
    py = np.zeros_like(v)
    tau = 0.248
    for _ in range(n_iter):
        gx, gy = _grad(_div(px, py) - v / weight)
        norm = 1.0 + tau * np.sqrt(gx * gx + gy * gy)
        px = (px + tau * gx) / norm
        py = (py + tau * gy) / norm
    return v - weight * _div(px, py)


class _CountModel:
    """Negative log-likelihood of the counts as a function of u = log(lambda)."""

    def __init__(self, counts: CountImage, params: CameraParams, window, polarity):
        self.params = params
        self.scale = window * params.n_trials * counts.binning
        self.valid = counts.valid
        self.terms = []
        if polarity in ("both", "pos"):
            self.terms.append((params.eps_pos, counts.pos.astype(np.float64)))
        if polarity in ("both", "neg"):
            self.terms.append((params.eps_neg, counts.neg.astype(np.float64)))

    def nll(self, u) -> float:
        lam = np.exp(u)
        total = 0.0
        for eps, k in self.terms:
            mu = np.maximum(self.scale * p_event(lam, eps, self.params.b_pr), 1e-300)
            total += np.sum((mu - k * np.log(mu))[self.valid])
        return float(total)

    def grad(self, u):
        lam = np.exp(u)
        g = np.zeros_like(u)
        for eps, k in self.terms:
            mu = np.maximum(self.scale * p_event(lam, eps, self.params.b_pr), 1e-300)
            dmu = self.scale * dp_event_dlam(lam, eps, self.params.b_pr) * lam
            g += (1.0 - k / mu) * dmu
        g[~self.valid] = 0.0
        return g

    def curvature(self, u):
        """Fisher information per pixel, a step-size scale."""
        lam = np.exp(u)
        info = np.zeros_like(u)
        for eps, _ in self.terms:
            mu = np.maximum(self.scale * p_event(lam, eps, self.params.b_pr), 1e-300)
            dmu = self.scale * dp_event_dlam(lam, eps, self.params.b_pr) * lam
            info += dmu * dmu / mu
        return info


def refine_map(
    ml_estimate: IntensityImage,
    counts: CountImage,
    params: CameraParams,
    config: ReconstructionConfig,
    *,
    trace: list | None = None,
) -> IntensityImage:
    """Minimize count NLL + beta * TV(log lambda) by proximal gradient steps.

    Starts from ``ml_estimate`` and keeps log-intensity inside the grid range.
    Steps are accepted only when the objective does not increase, so the
    objective sequence (appended to ``trace`` if given) is non-increasing.
    Invalid pixels contribute no likelihood and are filled by the TV term.
    """
    beta = config.smoothness_weight
    if beta == 0:
        return ml_estimate
    if ml_estimate.shape != counts.shape:
        raise ValueError("estimate and counts differ in shape")
    grid = config.grid()
    lo, hi = np.log(grid[0]), np.log(grid[-1])
    window = config.window if config.window is not None else counts.window
    model = _CountModel(counts, params, window, config.polarity)

    def objective(u):
        f = model.nll(u) + beta * total_variation(u)
        if not np.isfinite(f):
            raise FloatingPointError(f"non-finite refinement objective ({f})")
        return f

    u = np.clip(np.log(ml_estimate.values), lo, hi)
    f = objective(u)
    if trace is not None:
        trace.append(f)
    step = 1.0 / max(float(model.curvature(u).max()), 1e-12)
    for _ in range(config.max_refine_iters):
        g = model.grad(u)
        accepted = False
        for _ in range(40):
            cand = np.clip(tv_prox(u - step * g, step * beta), lo, hi)
            fc = objective(cand)
            if fc <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        change = (f - fc) / max(abs(f), 1e-300)
        u, f = cand, fc
        if trace is not None:
            trace.append(f)
        step *= 1.5
        if change < 1e-6:
            break
    return IntensityImage(np.exp(u), PHOTON_COUNT)


# ---------------------------------------------------------------------------
# Pipeline and display


class Reconstruction(NamedTuple):
    image: IntensityImage
    ambiguous: np.ndarray
    saturated: np.ndarray
    valid: np.ndarray


def reconstruct(counts: CountImage, params: CameraParams, config: ReconstructionConfig = ReconstructionConfig()):
    """Bin (optionally), invert, refine (if beta > 0) and return full-resolution maps."""
    work = bin2x2(counts) if config.bin2x2 else counts
    est = invert_ml(work, params, config)
    img = est.image
    if config.smoothness_weight > 0:
        img = refine_map(img, work, params, config)
    amb, sat, valid = est.ambiguous, est.saturated, est.valid
    if config.bin2x2:
        img = unbin(img, counts.shape)

        def up(m):
            return unbin(IntensityImage(m.astype(float)), counts.shape).values > 0.5

        amb, sat, valid = up(amb), up(sat), up(valid) & counts.valid
    return Reconstruction(img, amb, sat, valid)


def to_gray(lambda_image: IntensityImage, gray_map) -> IntensityImage:
    """Map photon counts back to display gray levels through ``gray_map``."""
    if lambda_image.unit != PHOTON_COUNT:
        raise ValueError("expected a photon-count image")
    g = gray_map.to_gray(lambda_image.values)
    return IntensityImage(g, GRAY_LEVEL, gray_map.max_gray)
