"""
Recovering camera parameters from a rate curve
==============================================
"""

import tempfile
from pathlib import Path

import numpy as np

from evnoise import CameraParams, fit_params, p_event
from evnoise.calibration import CalibrationCurve

truth = CameraParams(eps_pos=0.2, eps_neg=0.25, b_pr=20.0, n_trials=1e4)
lam = np.geomspace(1, 1e4, 20)

# measured rates with 2% multiplicative error, as from a real bench sweep
rng = np.random.default_rng(0)
pos = truth.n_trials * p_event(lam, truth.eps_pos, truth.b_pr) * (1 + 0.02 * rng.standard_normal(lam.size))
neg = truth.n_trials * p_event(lam, truth.eps_neg, truth.b_pr) * (1 + 0.02 * rng.standard_normal(lam.size))
curve = CalibrationCurve(lam, pos, neg, 1.0)

fit, report = fit_params(curve)
print("truth:", truth.eps_pos, truth.eps_neg, truth.b_pr, truth.n_trials)
print("fit:  ", round(fit.eps_pos, 4), round(fit.eps_neg, 4), round(fit.b_pr, 2), round(fit.n_trials))
print(f"objective {report.grid_objective:.3g} -> {report.objective:.3g} in {report.iterations} simplex steps")

# curves round-trip through CSV, which is what the CLI consumes
path = Path(tempfile.mkdtemp()) / "curve.csv"
curve.save(path)
print(path.read_text().splitlines()[:3])
