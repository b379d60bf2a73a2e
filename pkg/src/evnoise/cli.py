"""
Command-line front end.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are option names (dashes or underscores); command-line flags override
the file. Each run writes ``<output>.config.txt`` echoing the effective
options. Logs go to stderr.

Exit codes: 0 success, 2 validation/usage, 3 I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import pgm
from .calibration import CalibrationCurve, GrayToLambdaMap, fit_params, fit_variance_table
from .events import (
    GRAY_LEVEL,
    CountImage,
    EventFormatError,
    EventValidationError,
    IntensityImage,
    load_events,
    save_events,
)
from .metrics import psnr, ssim
from .noise_model import NEGATIVE_BINOMIAL, CameraParams, parse_key_values, rate_curve
from .reconstruction import ReconstructionConfig, aggregate, reconstruct, to_gray
from .stream_ops import (
    BafConfig,
    baf_split,
    masked_aggregate,
    motion_mask,
    motion_mask_frames,
    read_mask,
    stitch,
    write_mask,
)
from .synthesis import PixelVariability, generate_dataset, gray_scene, sample_counts, sample_stream

log = logging.getLogger("evnoise")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

_NOT_ECHOED = {"func", "config", "threads", "command", "verbose"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _write_echo(path: Path, args) -> None:
    # unset options are left out so the echo can be fed back through --config
    items = sorted((k, v) for k, v in vars(args).items() if k not in _NOT_ECHOED and v is not None)
    lines = [f"command = {args.command}"]
    for k, v in items:
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    Path(str(path) + ".config.txt").write_text("\n".join(lines) + "\n")


def _load_params(path) -> CameraParams:
    if path is None:
        raise UsageError("--params is required")
    try:
        return CameraParams.load(path)
    except FileNotFoundError:
        raise UsageError(f"params file not found: {path}") from None


def _load_gray_map(path):
    return GrayToLambdaMap.load(path) if path else None


def _read_gray(path) -> IntensityImage:
    return pgm.read_image(path)


def _lambda_image(img: IntensityImage, gray_map, params) -> IntensityImage:
    return gray_scene(img, gray_map, params)


def _display(lam: IntensityImage, gray_map) -> IntensityImage:
    """Photon counts to a writable gray image: via the map, else rounded 16-bit counts."""
    if gray_map is not None:
        return to_gray(lam, gray_map)
    v = np.clip(np.round(lam.values), 0, 65535)
    return IntensityImage(v, GRAY_LEVEL, 65535)


def _write_counts(prefix: str, counts: CountImage) -> None:
    for ch in ("pos", "neg"):
        a = getattr(counts, ch)
        if a.size and a.max() > 65535:
            log.warning("%s counts exceed 16 bits; clipping", ch)
            a = np.minimum(a, 65535)
        pgm.write_pgm(f"{prefix}_{ch}.pgm", a, 65535)


def _event_ext(fmt: str) -> str:
    return ".csv" if fmt == "csv" else ".bin"


def _span(stream):
    if len(stream) == 0:
        return 0.0, 1e-6
    t0 = stream.t[0] * 1e-6
    return t0, (stream.t[-1] + 1) * 1e-6 - t0


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    params = _load_params(args.params)
    gray_map = _load_gray_map(args.gray_map)
    scene = _lambda_image(_read_gray(args.scene), gray_map, params)
    var = PixelVariability(args.eps_sigma, args.jitter_seed)
    if args.stream:
        stream = sample_stream(scene, params, args.window, var, args.seed, workers=args.threads)
        save_events(stream, args.out + "_events" + _event_ext(args.event_format), args.event_format)
        counts = aggregate(stream, 0.0, args.window)
    else:
        counts = sample_counts(scene, params, args.window, var, args.seed, workers=args.threads)
    _write_counts(args.out, counts)
    _write_echo(Path(args.out), args)
    log.info("simulated %dx%d counts, %d pos / %d neg events",
             counts.width, counts.height, counts.pos.sum(), counts.neg.sum())
    return EXIT_OK


def cmd_calibrate(args) -> int:
    curve = CalibrationCurve.load(args.curve)
    template = CameraParams.load(args.template) if args.template else CameraParams()
    params, report = fit_params(curve, template=template, rate_floor=args.rate_floor)
    if args.dispersion == NEGATIVE_BINOMIAL or (args.dispersion == "auto" and curve.has_variance):
        params = params.replace(dispersion=fit_variance_table(curve))
    if args.out:
        params.save(args.out)
        _write_echo(Path(args.out), args)
    if args.report == "json-lines":
        for i, lam in enumerate(curve.lambdas):
            print(json.dumps({
                "lambda": float(lam),
                "pos_rate": float(curve.pos_rate[i]),
                "pos_residual": float(report.residuals_pos[i]),
                "neg_rate": float(curve.neg_rate[i]),
                "neg_residual": float(report.residuals_neg[i]),
            }))
        print(json.dumps({"summary": report.summary()}))
    else:
        for k, v in report.summary().items():
            print(f"{k} = {v}")
    if not report.converged:
        log.warning("refinement did not improve on the grid search; returning grid best")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    params = _load_params(args.params)
    gray_map = _load_gray_map(args.gray_map)
    mask = read_mask(args.mask) if args.mask else None
    if args.events:
        stream = load_events(args.events)
        t0, span = _span(stream)
        t_start = args.t_start if args.t_start is not None else t0
        window = args.window if args.window is not None else span
        if mask is not None:
            counts = masked_aggregate(stream, mask, t_start, window)
        else:
            counts = aggregate(stream, t_start, window)
    elif args.pos and args.neg:
        if args.window is None:
            raise UsageError("--window is required with count graymaps")
        pos, _ = pgm.read_pgm(args.pos)
        neg, _ = pgm.read_pgm(args.neg)
        valid = None if mask is None else ~mask.mask
        if valid is not None:
            pos, neg = np.where(valid, pos, 0), np.where(valid, neg, 0)
        counts = CountImage(pos, neg, args.window, valid=valid)
    else:
        raise UsageError("give --events or both --pos and --neg")

    if args.lambda_range:
        lam_range = tuple(args.lambda_range)
    elif gray_map is not None:
        lam_range = (max(params.lambda_min, gray_map.lambdas[0]), gray_map.lambdas[-1])
    else:
        lam_range = (params.lambda_min, 1e4)
    config = ReconstructionConfig(
        lambda_range=lam_range,
        grid_size=args.grid_size,
        bin2x2=args.bin2x2,
        smoothness_weight=args.beta,
        max_refine_iters=args.iters,
        polarity=args.polarity,
        likelihood=args.likelihood,
        workers=args.threads,
    )
    rec = reconstruct(counts, params, config)
    out = _display(rec.image, gray_map)
    Path(args.out).write_bytes(pgm.write_image(out))
    amb_path = args.ambiguity_out or str(Path(args.out).with_suffix("")) + "_ambiguity.pgm"
    write_mask(rec.ambiguous, amb_path)
    _write_echo(Path(args.out), args)
    if args.truth:
        truth = _read_gray(args.truth)
        print(f"psnr={psnr(out, truth):.4f} ssim={ssim(out, truth):.6f}")
    return EXIT_OK


def cmd_split(args) -> int:
    stream = load_events(args.events)
    signal, noise = baf_split(stream, BafConfig(args.dt_us, args.radius))
    save_events(signal, args.signal_out, args.event_format)
    save_events(noise, args.noise_out, args.event_format)
    _write_echo(Path(args.noise_out), args)
    log.info("split %d events: %d signal, %d noise", len(stream), len(signal), len(noise))
    return EXIT_OK


def cmd_mask(args) -> int:
    signal = load_events(args.events)
    t0, span = _span(signal)
    t_start = args.t_start if args.t_start is not None else t0
    window = args.window if args.window is not None else span
    if args.frame and args.frame > 0:
        m = motion_mask_frames(signal, t_start, window, args.frame, args.threshold, args.dilation)
    else:
        m = motion_mask(signal, t_start, window, args.threshold, args.dilation)
    write_mask(m, args.out)
    _write_echo(Path(args.out), args)
    return EXIT_OK


def cmd_stitch(args) -> int:
    static = _read_gray(args.static)
    dynamic = _read_gray(args.dynamic)
    mask = read_mask(args.mask)
    if static.maxval != dynamic.maxval:
        raise UsageError("static and dynamic graymaps differ in bit depth")
    out = stitch(static, dynamic, mask, feather=args.feather)
    Path(args.out).write_bytes(pgm.write_image(out))
    _write_echo(Path(args.out), args)
    return EXIT_OK


def cmd_eval(args) -> int:
    a, b = _read_gray(args.a), _read_gray(args.b)
    p, s = psnr(a, b), ssim(a, b)
    if args.json:
        print(json.dumps({"psnr": "inf" if math.isinf(p) else p, "ssim": s}))
    else:
        print(f"psnr={'inf' if math.isinf(p) else f'{p:.4f}'} ssim={s:.6f}")
    return EXIT_OK


def cmd_curve(args) -> int:
    params = _load_params(args.params)
    grid = np.geomspace(args.lambda_min, args.lambda_max, args.points)
    curve = CalibrationCurve(grid, rate_curve(params, grid, 1)[:, 1], rate_curve(params, grid, -1)[:, 1], 1.0)
    text = curve.to_csv()
    if args.out:
        Path(args.out).write_text(text)
        _write_echo(Path(args.out), args)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_dataset(args) -> int:
    params = _load_params(args.params)
    gray_map = _load_gray_map(args.gray_map)
    files = sorted(Path(args.scenes).glob("*.pgm"))
    if not files:
        raise UsageError(f"no .pgm scenes in {args.scenes}")
    scenes = [_lambda_image(_read_gray(f), gray_map, params) for f in files]
    entries = generate_dataset(
        scenes,
        params,
        args.window,
        PixelVariability(args.eps_sigma, args.jitter_seed),
        args.seed,
        args.out,
        gray_map=gray_map,
        names=[f.stem for f in files],
    )
    _write_echo(Path(args.out) / "manifest", args)
    log.info("wrote %d samples to %s", len(entries), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--threads", type=int, default=1, help="worker threads (outputs do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evnoise", description="Photon-noise event simulation and static scene recovery.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample noise-event counts for a static scene")
    _common(p)
    p.add_argument("--scene", required=True, help="scene graymap")
    p.add_argument("--params")
    p.add_argument("--gray-map", help="gray,lambda CSV (default: gray level = lambda)")
    p.add_argument("--window", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps-sigma", type=float, default=0.0)
    p.add_argument("--jitter-seed", type=int, default=0)
    p.add_argument("--stream", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--event-format", choices=["binary", "csv"], default="binary")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit camera parameters to a rate curve")
    _common(p)
    p.add_argument("--curve", required=True)
    p.add_argument("--out", help="fitted params file")
    p.add_argument("--template", help="params file supplying non-fitted fields")
    p.add_argument("--rate-floor", type=float, default=1e-3)
    p.add_argument("--dispersion", choices=["auto", "poisson", NEGATIVE_BINOMIAL], default="auto")
    p.add_argument("--report", choices=["text", "json-lines"], default="text")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reconstruct", help="recover a static image from noise-event counts")
    _common(p)
    p.add_argument("--events")
    p.add_argument("--pos")
    p.add_argument("--neg")
    p.add_argument("--params")
    p.add_argument("--gray-map")
    p.add_argument("--t-start", type=float)
    p.add_argument("--window", type=float)
    p.add_argument("--bin2x2", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--mask")
    p.add_argument("--polarity", choices=["both", "pos", "neg"], default="both")
    p.add_argument("--likelihood", choices=["poisson", NEGATIVE_BINOMIAL], default="poisson")
    p.add_argument("--grid-size", type=int, default=512)
    p.add_argument("--lambda-range", type=float, nargs=2)
    p.add_argument("--truth", help="ground-truth graymap; prints PSNR/SSIM")
    p.add_argument("--out", required=True)
    p.add_argument("--ambiguity-out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("split", help="separate signal and noise events")
    _common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--dt-us", type=int, default=1000)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--signal-out", required=True)
    p.add_argument("--noise-out", required=True)
    p.add_argument("--event-format", choices=["binary", "csv"])
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("mask", help="motion mask from signal events")
    _common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--t-start", type=float)
    p.add_argument("--window", type=float)
    p.add_argument("--frame", type=float, default=0.033, help="per-frame thresholding; 0 = one window")
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--dilation", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("stitch", help="composite static and dynamic images")
    _common(p)
    p.add_argument("--static", required=True)
    p.add_argument("--dynamic", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--feather", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("eval", help="PSNR and SSIM between two graymaps")
    _common(p)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curve", help="theoretical rate curve as calibration CSV")
    _common(p)
    p.add_argument("--params")
    p.add_argument("--lambda-min", type=float, default=1.0)
    p.add_argument("--lambda-max", type=float, default=1e4)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("dataset", help="synthetic dataset from a directory of scene graymaps")
    _common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--params")
    p.add_argument("--gray-map")
    p.add_argument("--window", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps-sigma", type=float, default=0.0)
    p.add_argument("--jitter-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so flags still win."""
    subparsers = parser._subparsers._group_actions[0].choices
    # first pass only locates the subcommand and config file; the file may
    # supply options that are otherwise required
    required = [a for sp in subparsers.values() for a in sp._actions if a.required]
    for a in required:
        a.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for a in required:
            a.required = True
    if not getattr(args, "config", None):
        return parser.parse_args(argv)
    try:
        kv = parse_key_values(Path(args.config).read_text())
    except ValueError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    sub = subparsers[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in kv.items():
        dest = key.replace("-", "_")
        if dest == "command":
            if value != args.command:
                raise UsageError(f"{args.config}: written for {value!r}, not {args.command!r}")
            continue
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise UsageError(f"{args.config}: unknown option {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{args.config}: {key} must be true/false")
            defaults[dest] = value.lower() in ("true", "1", "yes")
        elif action.nargs not in (None, "?"):
            defaults[dest] = [action.type(v) if action.type else v for v in value.replace(",", " ").split()]
        else:
            defaults[dest] = value
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults and a.required:
            a.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"evnoise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"evnoise: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, EventFormatError, EventValidationError, pgm.GraymapError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (FloatingPointError, ArithmeticError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
