"""
How often does a static pixel fire?
===================================

Shot noise alone makes a pixel looking at a constant scene emit events.
The rate depends on brightness, and with a photoreceptor bias it first
rises and then falls again.
"""

import numpy as np

from evnoise import CameraParams, p_event, rate_curve

lam = np.geomspace(1, 1e4, 9)

# no bias: darker pixels are noisier, monotonically
cam = CameraParams(eps_pos=0.2, eps_neg=0.3, b_pr=0.0, n_trials=1e4)
print("b_pr = 0")
for l, r in rate_curve(cam, lam, 1):
    print(f"  lambda {l:9.1f}  ->  {r:10.2f} ev/s")

# with a bias the curve peaks near lambda = b_pr
cam = cam.replace(b_pr=20.0)
fine = np.geomspace(1, 1e4, 2000)
pos = rate_curve(cam, fine, 1)[:, 1]
print(f"\nb_pr = 20, positive rate peaks at lambda = {fine[np.argmax(pos)]:.1f}")

# The probability only sees (lam + b) / sqrt(lam), so lam and b^2/lam
# are indistinguishable from a single count. That is the ambiguity the
# reconstruction has to deal with.
print(p_event(5.0, 0.2, 20.0), p_event(80.0, 0.2, 20.0))

# Larger thresholds suppress noise quickly
for eps in (0.1, 0.2, 0.4, 0.8):
    print(f"eps {eps:.1f}: p = {p_event(100.0, eps, 20.0):.2e}")
