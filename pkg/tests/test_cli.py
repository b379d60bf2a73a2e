import json
import math
import subprocess
import sys

import numpy as np
import pytest

from evnoise import cli, pgm
from evnoise.calibration import CalibrationCurve
from evnoise.events import EventStream, load_events, save_events
from evnoise.noise_model import CameraParams
from evnoise.scenes import gradient_patches, monitor_gray_map

PARAMS = CameraParams(eps_pos=0.07, eps_neg=0.1, b_pr=20.0, n_trials=1e4)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def setup(tmp_path):
    PARAMS.save(tmp_path / "cam.txt")
    monitor_gray_map().save(tmp_path / "gm.csv")
    truth = gradient_patches((48, 40), seed=2)
    pgm.write_pgm(tmp_path / "scene.pgm", truth.values.astype(np.int64), 255)
    return tmp_path


def _cam(root):
    return ["--params", root / "cam.txt", "--gray-map", root / "gm.csv"]


def test_simulate_minimal(setup):
    assert run("simulate", "--scene", setup / "scene.pgm", *_cam(setup), "--out", setup / "a") == 0
    pos, maxval = pgm.read_pgm(setup / "a_pos.pgm")
    assert pos.shape == (48, 40) and maxval == 65535
    assert (setup / "a_neg.pgm").exists()
    echo = (setup / "a.config.txt").read_text()
    assert "command = simulate" in echo and "window = 1.0" in echo and "threads" not in echo
    assert not (setup / "a_events.bin").exists()


def test_simulate_stream(setup):
    args = ["simulate", "--scene", setup / "scene.pgm", *_cam(setup), "--window", 0.2, "--stream"]
    assert run(*args, "--out", setup / "a") == 0
    s = load_events(setup / "a_events.bin")
    assert np.all(np.diff(s.t) >= 0)
    pos, _ = pgm.read_pgm(setup / "a_pos.pgm")
    assert pos.sum() == np.count_nonzero(s.p == 1)
    assert run(*args, "--event-format", "csv", "--out", setup / "b") == 0
    assert load_events(setup / "b_events.csv") == s


def test_simulate_repeatable(setup):
    args = ["simulate", "--scene", setup / "scene.pgm", *_cam(setup), "--seed", 4, "--eps-sigma", 0.02]
    assert run(*args, "--out", setup / "a") == 0
    first = [(setup / f"a_{c}.pgm").read_bytes() for c in ("pos", "neg")]
    assert run(*args, "--threads", 3, "--out", setup / "a") == 0
    assert first == [(setup / f"a_{c}.pgm").read_bytes() for c in ("pos", "neg")]


def test_curve_stdout_decreasing(setup, capsys):
    CameraParams(eps_pos=0.2, eps_neg=0.3, b_pr=0.0).save(setup / "flat.txt")
    assert run("curve", "--params", setup / "flat.txt", "--points", 50) == 0
    curve = CalibrationCurve.from_csv(capsys.readouterr().out)
    assert len(curve.lambdas) == 50
    assert np.all(np.diff(curve.pos_rate) < 0) and np.all(np.diff(curve.neg_rate) < 0)


def test_calibrate_round_trip(setup, capsys):
    truth = CameraParams(eps_pos=0.3, eps_neg=0.35, b_pr=20.0, n_trials=1e4, refractory_us=7.0)
    truth.save(setup / "truth.txt")
    assert run("curve", "--params", setup / "truth.txt", "--points", 20, "--out", setup / "c.csv") == 0
    assert run("calibrate", "--curve", setup / "c.csv", "--template", setup / "truth.txt",
               "--out", setup / "fit.txt") == 0
    fit = CameraParams.load(setup / "fit.txt")
    assert fit.eps_pos == pytest.approx(0.3, rel=0.05)
    assert fit.eps_neg == pytest.approx(0.35, rel=0.05)
    assert fit.b_pr == pytest.approx(20.0, rel=0.1)
    assert fit.n_trials == pytest.approx(1e4, rel=0.05)
    assert fit.refractory_us == 7.0
    assert "converged = True" in capsys.readouterr().out


def test_calibrate_json_lines(setup, capsys):
    assert run("curve", "--params", setup / "cam.txt", "--points", 12, "--out", setup / "c.csv") == 0
    capsys.readouterr()
    assert run("calibrate", "--curve", setup / "c.csv", "--report", "json-lines") == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 13
    assert {"lambda", "pos_rate", "pos_residual", "neg_rate", "neg_residual"} <= rows[0].keys()
    assert rows[-1]["summary"]["converged"] is True


def test_calibrate_with_variance_gives_negative_binomial(setup):
    lam = np.geomspace(1, 1e4, 10)
    c = CalibrationCurve(lam, 1e3 / lam, 2e3 / lam, 1.0, 3e3 / lam, 5e3 / lam)
    c.save(setup / "v.csv")
    assert run("calibrate", "--curve", setup / "v.csv", "--out", setup / "fit.txt") == 0
    assert CameraParams.load(setup / "fit.txt").dispersion.kind == "negative-binomial"


def test_calibrate_malformed_csv(setup, caplog):
    (setup / "bad.csv").write_text("# window=1\nlambda,pos_rate,neg_rate\n1,2,3\n2,oops,3\n")
    assert run("calibrate", "--curve", setup / "bad.csv") == 2
    assert "line 4" in caplog.text


def _simulate(root, window=1.0):
    assert run("simulate", "--scene", root / "scene.pgm", *_cam(root), "--window", window, "--seed", 1,
               "--out", root / "sim") == 0


def test_reconstruct_prints_quality(setup, capsys):
    _simulate(setup)
    capsys.readouterr()
    assert run("reconstruct", "--pos", setup / "sim_pos.pgm", "--neg", setup / "sim_neg.pgm", "--window", 1.0,
               *_cam(setup), "--no-bin2x2", "--truth", setup / "scene.pgm", "--out", setup / "rec.pgm") == 0
    out = capsys.readouterr().out
    p = float(out.split("psnr=")[1].split()[0])
    s = float(out.split("ssim=")[1].split()[0])
    assert p > 30 and s > 0.8
    assert (setup / "rec_ambiguity.pgm").exists()
    assert pgm.read_pgm(setup / "rec.pgm")[0].shape == (48, 40)


def test_reconstruct_polarity_ablation(setup, capsys):
    _simulate(setup)
    scores = {}
    for pol in ("both", "pos"):
        capsys.readouterr()
        assert run("reconstruct", "--pos", setup / "sim_pos.pgm", "--neg", setup / "sim_neg.pgm",
                   "--window", 1.0, *_cam(setup), "--polarity", pol, "--truth", setup / "scene.pgm",
                   "--out", setup / f"{pol}.pgm") == 0
        scores[pol] = capsys.readouterr().out
    assert (setup / "pos.pgm").read_bytes() != (setup / "both.pgm").read_bytes()


def test_reconstruct_without_gray_map_writes_16bit(setup):
    _simulate(setup)
    assert run("reconstruct", "--pos", setup / "sim_pos.pgm", "--neg", setup / "sim_neg.pgm", "--window", 1.0,
               "--params", setup / "cam.txt", "--beta", 0.5, "--iters", 5, "--out", setup / "rec.pgm") == 0
    a, maxval = pgm.read_pgm(setup / "rec.pgm")
    assert maxval == 65535 and a.max() > 255


def test_reconstruct_usage_errors(setup):
    _simulate(setup)
    assert run("reconstruct", "--pos", setup / "sim_pos.pgm", "--neg", setup / "sim_neg.pgm", "--window", 1,
               "--params", setup / "nope.txt", "--out", setup / "r.pgm") == 2
    assert run("reconstruct", "--params", setup / "cam.txt", "--out", setup / "r.pgm") == 2
    assert run("reconstruct", "--pos", setup / "sim_pos.pgm", "--neg", setup / "sim_neg.pgm",
               "--params", setup / "cam.txt", "--out", setup / "r.pgm") == 2


def test_numerical_failure_exit_code(setup, monkeypatch):
    _simulate(setup)

    def boom(*a, **k):
        raise FloatingPointError("non-finite")

    monkeypatch.setattr(cli, "reconstruct", boom)
    assert run("reconstruct", "--pos", setup / "sim_pos.pgm", "--neg", setup / "sim_neg.pgm", "--window", 1,
               *_cam(setup), "--out", setup / "r.pgm") == 4


def test_io_error_exit_code(setup):
    assert run("split", "--events", setup / "missing.bin", "--signal-out", setup / "s.bin",
               "--noise-out", setup / "n.bin") == 3
    assert run("eval", setup / "scene.pgm", setup / "scene.pgm", "--config", setup / "missing.txt") == 3


def test_malformed_events_exit_2(setup):
    (setup / "bad.csv").write_text("# evnoise-events v1 width=4 height=4\n1,9,0,1\n")
    assert run("split", "--events", setup / "bad.csv", "--signal-out", setup / "s.csv",
               "--noise-out", setup / "n.csv") == 2


def test_eval_identical(setup, capsys):
    assert run("eval", setup / "scene.pgm", setup / "scene.pgm") == 0
    assert capsys.readouterr().out.strip() == "psnr=inf ssim=1.000000"
    assert run("eval", setup / "scene.pgm", setup / "scene.pgm", "--json") == 0
    assert json.loads(capsys.readouterr().out) == {"psnr": "inf", "ssim": 1.0}


def test_split_mask_stitch(setup):
    s = EventStream(8, 8, [0, 10, 20, 30, 5000], [3, 4, 3, 4, 0], [3, 3, 4, 4, 7], [1, 1, -1, 1, 1])
    save_events(s, setup / "ev.bin")
    assert run("split", "--events", setup / "ev.bin", "--signal-out", setup / "sig.csv",
               "--noise-out", setup / "noise.bin") == 0
    sig, noise = load_events(setup / "sig.csv"), load_events(setup / "noise.bin")
    assert len(sig) == 3 and len(noise) == 2
    assert run("mask", "--events", setup / "sig.csv", "--frame", 0, "--threshold", 1, "--dilation", 0,
               "--out", setup / "m.pgm") == 0
    m, _ = pgm.read_pgm(setup / "m.pgm")
    assert set(zip(*np.nonzero(m))) == {(3, 4), (4, 3), (4, 4)}
    pgm.write_pgm(setup / "a.pgm", np.zeros((8, 8), np.int64), 255)
    pgm.write_pgm(setup / "b.pgm", np.full((8, 8), 200, np.int64), 255)
    assert run("stitch", "--static", setup / "a.pgm", "--dynamic", setup / "b.pgm", "--mask", setup / "m.pgm",
               "--out", setup / "st.pgm") == 0
    st, _ = pgm.read_pgm(setup / "st.pgm")
    assert np.array_equal(st > 0, m > 0)


def test_config_file_and_override(setup):
    (setup / "run.cfg").write_text(f"scene = {setup / 'scene.pgm'}\nparams = {setup / 'cam.txt'}\n"
                                   f"gray-map = {setup / 'gm.csv'}\nwindow = 0.25\nout = {setup / 'c'}\n")
    assert run("simulate", "--config", setup / "run.cfg") == 0
    assert "window = 0.25" in (setup / "c.config.txt").read_text()
    assert run("simulate", "--config", setup / "run.cfg", "--window", 0.5) == 0
    assert "window = 0.5" in (setup / "c.config.txt").read_text()
    (setup / "bad.cfg").write_text("colour = red\n")
    assert run("simulate", "--config", setup / "bad.cfg") == 2


def test_echo_replays_run(setup):
    assert run("simulate", "--scene", setup / "scene.pgm", *_cam(setup), "--window", 0.3,
               "--seed", 9, "--out", setup / "a") == 0
    first = (setup / "a_pos.pgm").read_bytes()
    (setup / "a_pos.pgm").unlink()
    assert run("simulate", "--config", setup / "a.config.txt") == 0
    assert (setup / "a_pos.pgm").read_bytes() == first
    assert run("curve", "--config", setup / "a.config.txt") == 2


def test_dataset(setup):
    (setup / "scenes").mkdir()
    for i in range(2):
        pgm.write_pgm(setup / "scenes" / f"im{i}.pgm", gradient_patches((16, 16), seed=i).values.astype(np.int64), 255)
    assert run("dataset", "--scenes", setup / "scenes", *_cam(setup), "--out", setup / "ds") == 0
    names = sorted(p.name for p in (setup / "ds").iterdir())
    assert "manifest.txt" in names and "im1_pos.pgm" in names and len(names) == 8
    assert run("dataset", "--scenes", setup / "empty", *_cam(setup), "--out", setup / "ds2") == 2


def test_bad_usage_exit_2():
    assert cli.main(["simulate"]) == 2
    assert cli.main(["nonsense"]) == 2
    assert cli.main(["--help"]) == 0


def test_module_and_script_entry_points(setup):
    r = subprocess.run([sys.executable, "-m", "evnoise", "eval", str(setup / "scene.pgm"), str(setup / "scene.pgm")],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("psnr=inf")
    r = subprocess.run(["evnoise", "curve", "--params", str(setup / "nope.txt")], capture_output=True, text=True)
    assert r.returncode == 2 and "params file not found" in r.stderr
    assert math.isinf(float("inf"))


def test_split_then_reconstruct_matches_true_noise(setup, capsys):
    from scipy.ndimage import binary_dilation

    from evnoise.scenes import moving_disc
    from evnoise.synthesis import gray_scene

    gm = monitor_gray_map()
    params = CameraParams(eps_pos=0.1, eps_neg=0.14, b_pr=20.0, n_trials=100.0)
    params.save(setup / "slow.txt")
    truth = gradient_patches((64, 64), seed=3)
    pgm.write_pgm(setup / "truth.pgm", truth.values.astype(np.int64), 255)
    lab = moving_disc(gray_scene(truth, gm, params), params, 2.0, radius=12, start=(18, 32), end=(46, 32),
                      t_move=(0.3, 0.305), seed=5)
    save_events(lab.stream, setup / "mixed.bin")
    save_events(lab.stream.select(~lab.is_signal), setup / "true_noise.bin")
    assert run("split", "--events", setup / "mixed.bin", "--dt-us", 100, "--signal-out", setup / "sig.bin",
               "--noise-out", setup / "noise.bin") == 0
    common = ["--params", setup / "slow.txt", "--gray-map", setup / "gm.csv", "--t-start", 0, "--window", 2.0]
    for name in ("noise", "true_noise"):
        assert run("reconstruct", "--events", setup / f"{name}.bin", *common, "--out", setup / f"{name}.pgm") == 0
    region = ~binary_dilation(lab.support, iterations=4)

    def score(name):
        a, _ = pgm.read_pgm(setup / f"{name}.pgm")
        mse = np.mean((a[region] - truth.values[region]) ** 2)
        return 10 * np.log10(255**2 / mse)

    assert abs(score("noise") - score("true_noise")) <= 1.0
