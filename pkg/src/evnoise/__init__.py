"""Photon-noise event modeling, synthesis and static scene recovery for event cameras."""

from .calibration import (
    CalibrationCurve,
    GrayToLambdaMap,
    fit_gray_map,
    fit_params,
    fit_variance_table,
)
from .events import (
    CountImage,
    Event,
    EventFormatError,
    EventStream,
    EventValidationError,
    IntensityImage,
    read_events,
    write_events,
)
from .metrics import psnr, ssim
from .noise_model import (
    CameraParams,
    DispersionModel,
    InverseIndex,
    build_inverse_index,
    expected_count,
    p_event,
    rate_curve,
)
from .reconstruction import (
    ReconstructionConfig,
    aggregate,
    bin2x2,
    invert_ml,
    reconstruct,
    refine_map,
    to_gray,
)
from .stream_ops import BafConfig, MotionMask, baf_split, masked_aggregate, motion_mask, stitch
from .synthesis import PixelVariability, generate_dataset, sample_counts, sample_stream

__version__ = "0.1.0"

__all__ = [
    "BafConfig",
    "CalibrationCurve",
    "CameraParams",
    "CountImage",
    "DispersionModel",
    "Event",
    "EventFormatError",
    "EventStream",
    "EventValidationError",
    "GrayToLambdaMap",
    "IntensityImage",
    "InverseIndex",
    "MotionMask",
    "PixelVariability",
    "ReconstructionConfig",
    "aggregate",
    "baf_split",
    "bin2x2",
    "build_inverse_index",
    "expected_count",
    "fit_gray_map",
    "fit_params",
    "fit_variance_table",
    "generate_dataset",
    "invert_ml",
    "masked_aggregate",
    "motion_mask",
    "p_event",
    "psnr",
    "rate_curve",
    "read_events",
    "reconstruct",
    "refine_map",
    "sample_counts",
    "sample_stream",
    "ssim",
    "stitch",
    "to_gray",
    "write_events",
]
