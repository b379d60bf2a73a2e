"""
Forward model of photon-noise events.

A pixel seeing a static mean photon count ``lam`` per sampling interval
compares two independent Gaussian photon counts through a logarithm offset
by the photoreceptor bias. An event of one polarity fires when

    (n + b_pr) - exp(eps) * (n0 + b_pr) > 0,   n, n0 ~ Normal(lam, lam)

which gives

    p_e(lam) = 1/2 - 1/2 * erf((lam + b_pr)(exp(eps) - 1) / sqrt(2 lam (1 + exp(2 eps))))

Negative events use the same expression with the negative threshold.
Event counts over a window are Poisson with mean ``window * n_trials * p_e``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.special import erfc

POISSON = "poisson"
NEGATIVE_BINOMIAL = "negative-binomial"


class DomainError(ValueError):
    pass


def _threshold_scale(eps):
    eps = np.asarray(eps, dtype=np.float64)
    return np.expm1(eps) / np.sqrt(2.0 * (1.0 + np.exp(2.0 * eps)))


def p_event(lam, eps, b_pr=0.0):
    """Probability that photon noise triggers an event in one trial.

    Vectorized over all arguments. ``lam`` must be strictly positive: the
    Gaussian approximation has no meaning at zero light.
    """
    lam = np.asarray(lam, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    b_pr = np.asarray(b_pr, dtype=np.float64)
    if np.any(~(lam > 0)):
        raise DomainError("mean photon count must be > 0")
    if np.any(~(eps > 0)):
        raise DomainError("contrast threshold must be > 0")
    if np.any(b_pr < 0):
        raise DomainError("photoreceptor bias must be >= 0")
    z = _threshold_scale(eps) * (lam + b_pr) / np.sqrt(lam)
    # erfc avoids cancellation in the far tail where 1 - erf(z) underflows.
    out = 0.5 * erfc(z)
    return out if out.ndim else float(out)


def dp_event_dlam(lam, eps, b_pr=0.0):
    """Derivative of :func:`p_event` with respect to ``lam``."""
    lam = np.asarray(lam, dtype=np.float64)
    c = _threshold_scale(eps)
    z = c * (lam + b_pr) / np.sqrt(lam)
    dz = c * (lam - b_pr) / (2.0 * lam**1.5)
    return -np.exp(-z * z) / math.sqrt(math.pi) * dz


@dataclass(frozen=True)
class DispersionModel:
    """Count-dispersion model.

    For ``negative-binomial``, ``variance_lambda``/``variance_values`` tabulate
    the window-count variance against the mean photon count; lookups are
    piecewise linear and clamp outside the table.
    """

    kind: str = POISSON
    variance_lambda: tuple = ()
    variance_values: tuple = ()

    def __post_init__(self):
        if self.kind not in (POISSON, NEGATIVE_BINOMIAL):
            raise ValueError(f"unknown dispersion kind {self.kind!r}")
        xs = tuple(float(v) for v in self.variance_lambda)
        vs = tuple(float(v) for v in self.variance_values)
        if len(xs) != len(vs):
            raise ValueError("variance table columns differ in length")
        if self.kind == NEGATIVE_BINOMIAL:
            if not xs:
                raise ValueError("negative-binomial dispersion needs a variance table")
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise ValueError("variance table lambdas must be strictly ascending")
            if any(v <= 0 for v in vs):
                raise ValueError("variances must be positive")
        object.__setattr__(self, "variance_lambda", xs)
        object.__setattr__(self, "variance_values", vs)

    def variance(self, lam):
        return np.interp(lam, self.variance_lambda, self.variance_values)


@dataclass(frozen=True)
class CameraParams:
    eps_pos: float = 0.3
    eps_neg: float = 0.3
    b_pr: float = 0.0
    n_trials: float = 1e4
    refractory_us: float = 0.0
    dispersion: DispersionModel = field(default_factory=DispersionModel)
    lambda_min: float = 1.0

    def __post_init__(self):
        if not (self.eps_pos > 0 and self.eps_neg > 0):
            raise ValueError("contrast thresholds must be > 0")
        if not self.b_pr >= 0:
            raise ValueError("b_pr must be >= 0")
        if not self.n_trials > 0:
            raise ValueError("n_trials must be > 0")
        if not self.refractory_us >= 0:
            raise ValueError("refractory_us must be >= 0")
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be > 0")

    def eps(self, polarity) -> float:
        if polarity in (1, "pos", "+"):
            return self.eps_pos
        if polarity in (-1, "neg", "-"):
            return self.eps_neg
        raise ValueError(f"bad polarity {polarity!r}")

    def replace(self, **changes) -> "CameraParams":
        return replace(self, **changes)

    def refractory_load(self, lambdas) -> float:
        """Largest ``n_trials * p_e * refractory`` over ``lambdas`` and both polarities.

        Refractory effects are negligible while this stays below 0.1.
        """
        lam = np.maximum(np.asarray(lambdas, dtype=np.float64), self.lambda_min)
        p = np.maximum(p_event(lam, self.eps_pos, self.b_pr), p_event(lam, self.eps_neg, self.b_pr))
        return float(np.max(self.n_trials * p) * self.refractory_us * 1e-6)

    # -- flat key-value text form ------------------------------------------

    def to_text(self) -> str:
        lines = [
            f"eps_pos = {self.eps_pos!r}",
            f"eps_neg = {self.eps_neg!r}",
            f"b_pr = {self.b_pr!r}",
            f"n_trials = {self.n_trials!r}",
            f"refractory_us = {self.refractory_us!r}",
            f"dispersion = {self.dispersion.kind}",
            f"lambda_min = {self.lambda_min!r}",
        ]
        if self.dispersion.variance_lambda:
            lines.append("variance_lambda = " + ",".join(map(repr, self.dispersion.variance_lambda)))
            lines.append("variance_values = " + ",".join(map(repr, self.dispersion.variance_values)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CameraParams":
        kv = parse_key_values(text)
        floats = {}
        for key in ("eps_pos", "eps_neg", "b_pr", "n_trials", "refractory_us", "lambda_min"):
            if key in kv:
                try:
                    floats[key] = float(kv.pop(key))
                except ValueError:
                    raise ValueError(f"{key}: not a number") from None
        for key in ("eps_pos", "eps_neg", "b_pr", "n_trials"):
            if key not in floats:
                raise ValueError(f"missing required key {key!r}")

        def floats_list(key):
            raw = kv.pop(key, "")
            return tuple(float(v) for v in raw.split(",") if v.strip())

        disp = DispersionModel(
            kv.pop("dispersion", POISSON),
            floats_list("variance_lambda"),
            floats_list("variance_values"),
        )
        if kv:
            raise ValueError(f"unknown keys: {', '.join(sorted(kv))}")
        return cls(dispersion=disp, **floats)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "CameraParams":
        with open(path) as fh:
            return cls.from_text(fh.read())


def parse_key_values(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def expected_count(lam, params: CameraParams, polarity, window: float):
    """Mean event count of one polarity over ``window`` seconds."""
    if window < 0:
        raise DomainError("window must be >= 0")
    return window * params.n_trials * p_event(lam, params.eps(polarity), params.b_pr)


def rate_curve(params: CameraParams, lambda_grid, polarity) -> np.ndarray:
    """``(len(grid), 2)`` array of ``(lambda, events per second)`` rows."""
    grid = np.asarray(lambda_grid, dtype=np.float64)
    if grid.ndim != 1 or (np.diff(grid) <= 0).any():
        raise DomainError("lambda grid must be strictly ascending")
    return np.column_stack([grid, expected_count(grid, params, polarity, 1.0)])


def poisson_loglik(k, mu):
    """Poisson log-likelihood without the ``log k!`` term; broadcasts."""
    mu = np.maximum(mu, 1e-300)
    return k * np.log(mu) - mu


class Candidates(NamedTuple):
    lambdas: np.ndarray
    loglik: np.ndarray


class InverseIndex:
    """Table of expected (positive, negative) counts on a lambda grid.

    ``query`` returns every grid lambda whose expected pair lies within
    ``n_sigma`` Poisson standard deviations of the observation, best
    likelihood first. The maximum-likelihood grid point is always included,
    so an observation falling between widely spaced nodes still gets an answer.
    """

    def __init__(self, params: CameraParams, lambda_grid, window: float, n_sigma: float = 3.0):
        grid = np.asarray(lambda_grid, dtype=np.float64)
        if grid.size == 0:
            raise ValueError("empty lambda grid")
        if grid.ndim != 1 or (np.diff(grid) <= 0).any() or grid[0] <= 0:
            raise ValueError("lambda grid must be positive and strictly ascending")
        if not window > 0:
            raise ValueError("window must be > 0")
        self.params = params
        self.window = float(window)
        self.n_sigma = float(n_sigma)
        self.lambdas = grid
        self.mu_pos = expected_count(grid, params, 1, window)
        self.mu_neg = expected_count(grid, params, -1, window)
        for a in (self.lambdas, self.mu_pos, self.mu_neg):
            a.setflags(write=False)

    def loglik(self, k_pos=None, k_neg=None) -> np.ndarray:
        ll = np.zeros_like(self.lambdas)
        if k_pos is not None:
            ll = ll + poisson_loglik(k_pos, self.mu_pos)
        if k_neg is not None:
            ll = ll + poisson_loglik(k_neg, self.mu_neg)
        return ll

    def query(self, k_pos=None, k_neg=None) -> Candidates:
        if k_pos is None and k_neg is None:
            raise ValueError("need at least one polarity count")
        dist2 = np.zeros_like(self.lambdas)
        if k_pos is not None:
            dist2 += (k_pos - self.mu_pos) ** 2 / np.maximum(self.mu_pos, 1.0)
        if k_neg is not None:
            dist2 += (k_neg - self.mu_neg) ** 2 / np.maximum(self.mu_neg, 1.0)
        full = self.loglik(k_pos, k_neg)
        keep = dist2 <= self.n_sigma**2
        keep[np.argmax(full)] = True
        inside = np.flatnonzero(keep)
        ll = full[inside]
        order = np.argsort(-ll, kind="stable")
        return Candidates(self.lambdas[inside][order], ll[order])


def build_inverse_index(params: CameraParams, lambda_grid, window: float, n_sigma: float = 3.0):
    return InverseIndex(params, lambda_grid, window, n_sigma)
