"""
Seeing a static scene through its noise
=======================================

Count noise events over a window, then invert the rate model pixel by
pixel. Longer windows give more events and a cleaner picture.
"""

import numpy as np

from evnoise import CameraParams, ReconstructionConfig, psnr, reconstruct, sample_counts, ssim, to_gray
from evnoise.scenes import gradient_patches, monitor_gray_map
from evnoise.synthesis import gray_scene

cam = CameraParams(eps_pos=0.07, eps_neg=0.10, b_pr=20.0, n_trials=1e4)
gm = monitor_gray_map(50, 5000)
truth = gradient_patches((128, 128), seed=0)
lam = gray_scene(truth, gm, cam)

cfg = ReconstructionConfig(lambda_range=(50, 5000), bin2x2=False)
for window in (0.1, 0.5, 2.0):
    counts = sample_counts(lam, cam, window, seed=1)
    rec = to_gray(reconstruct(counts, cam, cfg).image, gm)
    print(f"window {window:4.1f} s  events/pixel {counts.pos.mean() + counts.neg.mean():7.1f}"
          f"  PSNR {psnr(rec, truth):5.2f} dB  SSIM {ssim(rec, truth):.3f}")

# a bit of total variation helps at short windows
counts = sample_counts(lam, cam, 0.1, seed=1)
for beta in (0.0, 0.5, 2.0):
    rec = to_gray(reconstruct(counts, cam, ReconstructionConfig(lambda_range=(50, 5000), bin2x2=False,
                                                                smoothness_weight=beta)).image, gm)
    print(f"beta {beta}: {psnr(rec, truth):.2f} dB")

# one polarity at a time
counts = sample_counts(lam, cam, 1.0, seed=2)
for pol in ("both", "pos", "neg"):
    g = to_gray(reconstruct(counts, cam, ReconstructionConfig(lambda_range=(50, 5000), bin2x2=False,
                                                              polarity=pol)).image, gm)
    print(pol, np.sqrt(np.mean((g.values - truth.values) ** 2)).round(2))
