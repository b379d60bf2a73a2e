"""
Parameter fitting from measured noise-event rates, and the display
gray-level to photon-count map.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .noise_model import NEGATIVE_BINOMIAL, CameraParams, DispersionModel, p_event


class CurveFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True, eq=False)
class CalibrationCurve:
    """Measured per-pixel event rates (events/s) against mean photon count.

    ``pos_var``/``neg_var`` are optional variances of the per-window counts.
    """

    lambdas: np.ndarray
    pos_rate: np.ndarray
    neg_rate: np.ndarray
    window: float = 1.0
    pos_var: np.ndarray | None = None
    neg_var: np.ndarray | None = None

    def __post_init__(self):
        cols = {}
        for name in ("lambdas", "pos_rate", "neg_rate", "pos_var", "neg_var"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=np.float64)
                if v.ndim != 1:
                    raise ValueError(f"{name} must be 1-D")
            cols[name] = v
        n = len(cols["lambdas"])
        if any(v is not None and len(v) != n for v in cols.values()):
            raise ValueError("calibration columns differ in length")
        if (cols["pos_var"] is None) != (cols["neg_var"] is None):
            raise ValueError("give both variance columns or neither")
        lam = cols["lambdas"]
        if n and (lam[0] <= 0 or (np.diff(lam) <= 0).any()):
            raise ValueError("lambdas must be positive and strictly ascending")
        if (cols["pos_rate"] < 0).any() or (cols["neg_rate"] < 0).any():
            raise ValueError("rates must be >= 0")
        if not self.window > 0:
            raise ValueError("window must be > 0")
        for k, v in cols.items():
            object.__setattr__(self, k, v)

    @property
    def has_variance(self) -> bool:
        return self.pos_var is not None

    def scaled(self, rate_factor: float) -> "CalibrationCurve":
        return CalibrationCurve(
            self.lambdas, self.pos_rate * rate_factor, self.neg_rate * rate_factor, self.window
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# window={self.window!r}\n")
        cols = [self.lambdas, self.pos_rate, self.neg_rate]
        head = "lambda,pos_rate,neg_rate"
        if self.has_variance:
            cols += [self.pos_var, self.neg_var]
            head += ",pos_var,neg_var"
        buf.write(head + "\n")
        for row in zip(*cols):
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CalibrationCurve":
        window = None
        rows = []
        width = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            s = raw.strip()
            if not s:
                continue
            if s.startswith("#"):
                m = re.match(r"#\s*window\s*=\s*(\S+)\s*$", s)
                if m:
                    try:
                        window = float(m.group(1))
                    except ValueError:
                        raise CurveFormatError("bad window value", lineno) from None
                continue
            if s.replace(" ", "").startswith("lambda,"):
                continue
            parts = s.split(",")
            if len(parts) not in (3, 5):
                raise CurveFormatError(f"expected 3 or 5 fields, got {len(parts)}", lineno)
            if width is not None and len(parts) != width:
                raise CurveFormatError("inconsistent field count", lineno)
            width = len(parts)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise CurveFormatError(f"non-numeric field in {s!r}", lineno) from None
        if window is None:
            raise CurveFormatError("missing '# window=<seconds>' header")
        if not rows:
            raise CurveFormatError("no samples")
        a = np.array(rows)
        kw = {}
        if a.shape[1] == 5:
            kw = dict(pos_var=a[:, 3], neg_var=a[:, 4])
        try:
            return cls(a[:, 0], a[:, 1], a[:, 2], window, **kw)
        except ValueError as exc:
            raise CurveFormatError(str(exc)) from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path) -> "CalibrationCurve":
        with open(path) as fh:
            return cls.from_csv(fh.read())


# ---------------------------------------------------------------------------
# Rate-curve fitting

RATE_FLOOR = 1e-3


@dataclass
class FitReport:
    params: CameraParams
    objective: float
    grid_objective: float
    rmse_pos: float
    rmse_neg: float
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)
    residuals_pos: np.ndarray | None = None
    residuals_neg: np.ndarray | None = None

    def summary(self) -> dict:
        p = self.params
        return {
            "eps_pos": p.eps_pos,
            "eps_neg": p.eps_neg,
            "b_pr": p.b_pr,
            "n_trials": p.n_trials,
            "objective": self.objective,
            "grid_objective": self.grid_objective,
            "rmse_pos": self.rmse_pos,
            "rmse_neg": self.rmse_neg,
            "converged": self.converged,
            "iterations": self.iterations,
        }


DEFAULT_BOUNDS = {"eps": (0.005, 3.0), "b_pr": (0.0, None), "n_trials": (1e-6, 1e15)}


def _unpack(theta):
    return np.exp(theta[0]), np.exp(theta[1]), np.expm1(theta[2]), np.exp(theta[3])


def fit_params(
    curve: CalibrationCurve,
    init: CameraParams | None = None,
    bounds: dict | None = None,
    *,
    rate_floor: float = RATE_FLOOR,
    grid_size: int = 48,
    template: CameraParams | None = None,
) -> tuple[CameraParams, FitReport]:
    """Fit thresholds, bias and trial rate to a measured rate curve.

    Both polarities are fitted jointly with a shared ``b_pr`` and
    ``n_trials``. Residuals are relative, ``(measured - model) /
    max(measured, rate_floor)``. Without ``init`` the start comes from a
    log-spaced grid over (eps_pos, eps_neg, b_pr), with ``n_trials`` solved in
    closed form at every grid node; Nelder-Mead then refines in log space.
    Non-fitted fields (refractory, dispersion, lambda_min) come from
    ``template``.
    """
    lam = curve.lambdas
    if len(lam) < 8:
        raise ValueError("need at least 8 calibration samples")
    if lam[-1] / lam[0] < 10:
        raise ValueError("calibration samples must span at least one decade of lambda")
    m = np.stack([curve.pos_rate, curve.neg_rate])
    if not (m > 0).any():
        raise ValueError("degenerate calibration curve: all rates are zero")
    b = dict(DEFAULT_BOUNDS, **(bounds or {}))
    eps_lo, eps_hi = b["eps"]
    b_lo, b_hi = b["b_pr"]
    if b_hi is None:
        b_hi = 10.0 * lam[-1]
    n_lo, n_hi = b["n_trials"]
    w2 = 1.0 / np.maximum(m, rate_floor) ** 2

    def objective(theta):
        ep, en, bp, n = _unpack(theta)
        model = n * np.stack([p_event(lam, ep, bp), p_event(lam, en, bp)])
        return float(np.sum(w2 * (m - model) ** 2))

    # grid stage: N profiled out exactly, obj = C - (A+ + A-)^2 / (B+ + B-)
    eps_grid = np.geomspace(max(eps_lo, 1e-3), eps_hi, grid_size)
    b_grid = np.concatenate([[b_lo], np.geomspace(max(b_lo, lam[0] * 1e-2), b_hi, grid_size)])
    b_grid = np.unique(np.clip(b_grid, b_lo, b_hi))
    P = p_event(lam[None, None, :], eps_grid[:, None, None], b_grid[None, :, None])
    A = np.stack([np.sum(w2[s] * m[s] * P, axis=-1) for s in (0, 1)])
    B = np.stack([np.sum(w2[s] * P * P, axis=-1) for s in (0, 1)])
    C = float(np.sum(w2 * m * m))
    Asum = A[0][:, None, :] + A[1][None, :, :]
    Bsum = np.maximum(B[0][:, None, :] + B[1][None, :, :], 1e-300)
    grid_obj = C - Asum**2 / Bsum
    i, j, k = np.unravel_index(np.argmin(grid_obj), grid_obj.shape)
    n_best = float(np.clip(Asum[i, j, k] / Bsum[i, j, k], n_lo, n_hi))
    grid_theta = np.log([eps_grid[i], eps_grid[j], 1.0 + b_grid[k], n_best])
    grid_best = objective(grid_theta)

    if init is not None:
        start = np.log([init.eps_pos, init.eps_neg, 1.0 + init.b_pr, init.n_trials])
    else:
        start = grid_theta

    box = [
        (np.log(eps_lo), np.log(eps_hi)),
        (np.log(eps_lo), np.log(eps_hi)),
        (np.log1p(b_lo), np.log1p(b_hi)),
        (np.log(n_lo), np.log(n_hi)),
    ]
    trace = [objective(start)]
    theta = start
    iterations = 0
    # tolerances scale with the starting misfit so noisy curves stop early
    fatol = max(trace[0], 1e-300) * 1e-13
    # Nelder-Mead can stall on a degenerate simplex; restart until it stops improving.
    for _ in range(8):
        current = objective(theta)
        res = minimize(
            objective,
            theta,
            method="Nelder-Mead",
            bounds=box,
            callback=lambda intermediate_result: trace.append(float(intermediate_result.fun)),
            options={"xatol": 1e-9, "fatol": fatol, "maxiter": 20000, "maxfev": 40000,
                     "initial_simplex": _simplex(theta, box)},
        )
        iterations += int(res.nit)
        if res.fun <= current:
            theta = res.x
        if not res.fun < current * (1 - 1e-9):
            break
    final = objective(theta)
    trace.append(final)
    trace = list(np.minimum.accumulate(trace))

    converged = final < grid_best or np.isclose(final, grid_best, rtol=1e-12, atol=0) and grid_best == 0
    if not converged and init is None:
        theta, final = grid_theta, grid_best
    ep, en, bp, n = (float(v) for v in _unpack(theta))
    base = template or CameraParams()
    params = base.replace(eps_pos=ep, eps_neg=en, b_pr=max(bp, 0.0), n_trials=n)
    res_pos = curve.pos_rate - n * p_event(lam, ep, params.b_pr)
    res_neg = curve.neg_rate - n * p_event(lam, en, params.b_pr)
    report = FitReport(
        params=params,
        objective=final,
        grid_objective=grid_best,
        rmse_pos=float(np.sqrt(np.mean(res_pos**2))),
        rmse_neg=float(np.sqrt(np.mean(res_neg**2))),
        converged=bool(converged),
        iterations=iterations,
        trace=trace,
        residuals_pos=res_pos,
        residuals_neg=res_neg,
    )
    return params, report


def _simplex(theta, box):
    steps = np.array([0.1, 0.1, 0.3, 0.2])
    pts = [theta]
    for d in range(len(theta)):
        v = theta.copy()
        lo, hi = box[d]
        v[d] = v[d] + steps[d] if v[d] + steps[d] <= hi else v[d] - steps[d]
        pts.append(np.clip(v, lo, hi))
    return np.array(pts)


def fit_variance_table(curve: CalibrationCurve) -> DispersionModel:
    """Piecewise-linear count variance against lambda, averaged over polarities.

    Variances are clamped to at least 1.001 times the averaged mean count so
    the negative binomial stays defined.
    """
    if not curve.has_variance:
        raise ValueError("calibration curve has no variance columns; use Poisson dispersion")
    mean = 0.5 * (curve.pos_rate + curve.neg_rate) * curve.window
    var = 0.5 * (curve.pos_var + curve.neg_var)
    var = np.maximum(var, np.maximum(1.001 * mean, 1e-12))
    return DispersionModel(NEGATIVE_BINOMIAL, tuple(curve.lambdas), tuple(var))


# ---------------------------------------------------------------------------
# Gray level <-> photon count


@dataclass(frozen=True, eq=False)
class GrayToLambdaMap:
    """Monotone table from display gray level to mean photon count."""

    gray: np.ndarray
    lambdas: np.ndarray
    max_gray: int = 255

    def __post_init__(self):
        g = np.array(self.gray, dtype=np.float64)
        lam = np.array(self.lambdas, dtype=np.float64)
        if g.ndim != 1 or g.shape != lam.shape or g.size < 2:
            raise ValueError("gray map needs at least two nodes")
        if (np.diff(g) <= 0).any() or (np.diff(lam) <= 0).any():
            raise ValueError("gray map must be strictly increasing")
        object.__setattr__(self, "gray", g)
        object.__setattr__(self, "lambdas", lam)

    def to_lambda(self, gray):
        return np.interp(np.asarray(gray, dtype=np.float64), self.gray, self.lambdas)

    def to_gray(self, lam) -> np.ndarray:
        """Inverse lookup, rounded to integer levels; below the table is 0, above is ``max_gray``."""
        lam = np.asarray(lam, dtype=np.float64)
        g = np.interp(lam, self.lambdas, self.gray)
        g = np.where(lam < self.lambdas[0], 0.0, g)
        g = np.where(lam > self.lambdas[-1], self.max_gray, g)
        return np.clip(np.round(g), 0, self.max_gray).astype(np.int64)

    def table(self) -> np.ndarray:
        return self.to_lambda(np.arange(self.max_gray + 1))

    def to_csv(self) -> str:
        lines = [f"# max_gray={self.max_gray}", "gray,lambda"]
        lines += [f"{g!r},{v!r}" for g, v in zip(self.gray.tolist(), self.lambdas.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "GrayToLambdaMap":
        max_gray = 255
        g, v = [], []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            s = raw.strip()
            if not s or s.startswith("gray"):
                continue
            if s.startswith("#"):
                m = re.match(r"#\s*max_gray\s*=\s*(\d+)", s)
                if m:
                    max_gray = int(m.group(1))
                continue
            try:
                a, b = (float(t) for t in s.split(","))
            except ValueError:
                raise CurveFormatError(f"expected 'gray,lambda', got {s!r}", lineno) from None
            g.append(a)
            v.append(b)
        return cls(np.array(g), np.array(v), max_gray)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path) -> "GrayToLambdaMap":
        with open(path) as fh:
            return cls.from_csv(fh.read())


def isotonic_increasing(y, w=None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit (pool adjacent violators)."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    vals, wts, sizes = [], [], []
    for yi, wi in zip(y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] >= vals[-1]:
            v2, w2, n2 = vals.pop(), wts.pop(), sizes.pop()
            wsum = wts[-1] + w2
            vals[-1] = (vals[-1] * wts[-1] + v2 * w2) / wsum
            wts[-1] = wsum
            sizes[-1] += n2
    return np.repeat(vals, sizes)


def fit_gray_map(measurements, lux_to_lambda: float = 1.0, max_gray: int = 255) -> GrayToLambdaMap:
    """Monotone gray-to-lambda table from ``(gray level, lux)`` measurements.

    Repeated gray levels are averaged, the lux values are isotonically
    regressed, and pooled runs collapse to one node at their mean gray level
    so the table is strictly increasing.
    """
    a = np.asarray(measurements, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError("measurements must be (gray, lux) pairs")
    if not lux_to_lambda > 0:
        raise ValueError("lux_to_lambda must be positive")
    levels, inv, counts = np.unique(a[:, 0], return_inverse=True, return_counts=True)
    if levels.size < 2:
        raise ValueError("need at least two distinct gray levels")
    lux = np.bincount(inv, weights=a[:, 1]) / counts
    if np.ptp(lux) == 0:
        raise ValueError("all lux measurements are equal")
    fit = isotonic_increasing(lux, counts)
    # collapse pooled (equal) runs
    starts = np.flatnonzero(np.r_[True, np.diff(fit) > 0])
    ends = np.r_[starts[1:], fit.size]
    gray = np.array([np.average(levels[s:e], weights=counts[s:e]) for s, e in zip(starts, ends)])
    vals = fit[starts]
    if gray.size < 2:
        raise ValueError("measurements are non-increasing; no monotone map exists")
    return GrayToLambdaMap(gray, vals * lux_to_lambda, max_gray)
