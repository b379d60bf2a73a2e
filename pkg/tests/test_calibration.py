import numpy as np
import pytest

from evnoise.calibration import (
    CalibrationCurve,
    CurveFormatError,
    GrayToLambdaMap,
    fit_gray_map,
    fit_params,
    fit_variance_table,
    isotonic_increasing,
)
from evnoise.noise_model import NEGATIVE_BINOMIAL, CameraParams, rate_curve

TRUTH = CameraParams(eps_pos=0.3, eps_neg=0.35, b_pr=20.0, n_trials=1e4)
LAMBDAS = np.geomspace(1, 1e4, 20)


def _curve(params=TRUTH, lambdas=LAMBDAS):
    return CalibrationCurve(
        lambdas, rate_curve(params, lambdas, 1)[:, 1], rate_curve(params, lambdas, -1)[:, 1], 1.0
    )


def _close(fit, truth, eps_tol=0.05, b_tol=0.10, n_tol=0.05):
    assert fit.eps_pos == pytest.approx(truth.eps_pos, rel=eps_tol)
    assert fit.eps_neg == pytest.approx(truth.eps_neg, rel=eps_tol)
    assert fit.b_pr == pytest.approx(truth.b_pr, rel=b_tol)
    assert fit.n_trials == pytest.approx(truth.n_trials, rel=n_tol)


def test_noiseless_recovery():
    fit, report = fit_params(_curve())
    _close(fit, TRUTH)
    assert report.converged
    assert report.objective <= report.grid_objective


@pytest.mark.parametrize(
    "truth",
    [
        CameraParams(eps_pos=0.1, eps_neg=0.14, b_pr=5.0, n_trials=300.0),
        CameraParams(eps_pos=0.6, eps_neg=0.5, b_pr=150.0, n_trials=2e5),
    ],
)
def test_recovery_other_cameras(truth):
    fit, _ = fit_params(_curve(truth))
    _close(fit, truth, 0.01, 0.02, 0.01)


def test_noisy_median_within_tolerance():
    rng = np.random.default_rng(0)
    errs = []
    clean = _curve()
    for _ in range(10):
        noisy = CalibrationCurve(
            LAMBDAS,
            clean.pos_rate * (1 + 0.02 * rng.standard_normal(20)),
            clean.neg_rate * (1 + 0.02 * rng.standard_normal(20)),
            1.0,
        )
        fit, _ = fit_params(noisy)
        errs.append([fit.eps_pos / 0.3 - 1, fit.eps_neg / 0.35 - 1, fit.b_pr / 20 - 1, fit.n_trials / 1e4 - 1])
    assert np.all(np.median(np.abs(errs), axis=0) <= 0.15)


def test_rate_scale_equivariance():
    a, _ = fit_params(_curve())
    b, _ = fit_params(_curve().scaled(2.0))
    assert b.n_trials == pytest.approx(2 * a.n_trials, rel=1e-4)
    assert b.eps_pos == pytest.approx(a.eps_pos, rel=1e-4)
    assert b.eps_neg == pytest.approx(a.eps_neg, rel=1e-4)
    assert b.b_pr == pytest.approx(a.b_pr, rel=1e-3)


def test_trace_is_non_increasing_and_init_used():
    init = TRUTH.replace(eps_pos=0.4, eps_neg=0.3, b_pr=5.0, n_trials=3e3)
    fit, report = fit_params(_curve(), init=init)
    assert np.all(np.diff(report.trace) <= 0)
    _close(fit, TRUTH)


def test_template_fields_kept():
    template = CameraParams(refractory_us=12.0, lambda_min=3.0)
    fit, _ = fit_params(_curve(), template=template)
    assert fit.refractory_us == 12.0 and fit.lambda_min == 3.0


def test_fit_rejects_bad_curves():
    with pytest.raises(ValueError, match="8"):
        fit_params(_curve(lambdas=np.geomspace(1, 1e4, 5)))
    with pytest.raises(ValueError, match="decade"):
        fit_params(_curve(lambdas=np.linspace(10, 50, 10)))
    with pytest.raises(ValueError, match="zero"):
        fit_params(CalibrationCurve(LAMBDAS, np.zeros(20), np.zeros(20)))


def test_summary_keys():
    _, report = fit_params(_curve())
    s = report.summary()
    assert {"eps_pos", "eps_neg", "b_pr", "n_trials", "objective", "converged"} <= s.keys()


def test_csv_round_trip(tmp_path):
    c = CalibrationCurve(LAMBDAS[:10], np.arange(10.0), np.arange(10.0) * 2, 0.5, np.ones(10) * 3, np.ones(10) * 4)
    c.save(tmp_path / "c.csv")
    back = CalibrationCurve.load(tmp_path / "c.csv")
    assert back.window == 0.5 and back.has_variance
    for name in ("lambdas", "pos_rate", "neg_rate", "pos_var", "neg_var"):
        assert np.array_equal(getattr(back, name), getattr(c, name))


def test_csv_errors_name_line():
    with pytest.raises(CurveFormatError) as e:
        CalibrationCurve.from_csv("# window=1\nlambda,pos_rate,neg_rate\n1,2,3\n2,x,3\n")
    assert e.value.line == 4
    with pytest.raises(CurveFormatError, match="window"):
        CalibrationCurve.from_csv("1,2,3\n")
    with pytest.raises(CurveFormatError):
        CalibrationCurve.from_csv("# window=1\n1,2,3,4\n")


def _var_curve(ratio):
    lam = np.array([10.0, 100.0, 1000.0])
    pos = np.array([50.0, 20.0, 5.0])
    neg = np.array([30.0, 10.0, 1.0])
    mean = 0.5 * (pos + neg)
    return CalibrationCurve(lam, pos, neg, 1.0, ratio * pos, ratio * neg), mean


def test_variance_table_poisson_clamp():
    curve, mean = _var_curve(1.0)
    d = fit_variance_table(curve)
    assert d.kind == NEGATIVE_BINOMIAL
    assert np.allclose(d.variance_values, 1.001 * mean)


def test_variance_table_ratio_at_nodes():
    curve, mean = _var_curve(2.0)
    d = fit_variance_table(curve)
    assert np.allclose(d.variance(curve.lambdas) / mean, 2.0)


def test_variance_table_interpolates():
    curve, _ = _var_curve(2.0)
    d = fit_variance_table(curve)
    # halfway between the 10 and 100 nodes: (80 + 30) / 2
    assert d.variance(55.0) == pytest.approx(55.0)


def test_variance_table_needs_columns():
    with pytest.raises(ValueError):
        fit_variance_table(_curve())


def test_isotonic_five_points():
    assert np.allclose(isotonic_increasing([1, 3, 2, 4, 5]), [1, 2.5, 2.5, 4, 5])
    assert np.allclose(isotonic_increasing([5, 4, 3, 2, 1]), [3, 3, 3, 3, 3])
    assert np.allclose(isotonic_increasing([1.0, 3.0, 2.0], [1, 1, 3]), [1, 2.25, 2.25])


def test_gray_map_from_linear_measurements():
    g = np.arange(0, 256, 15.0)
    m = fit_gray_map(np.column_stack([g, 2.0 * g + 1.0]), lux_to_lambda=3.0)
    assert np.allclose(m.to_lambda([0, 100, 255]), 3.0 * (2.0 * np.array([0, 100, 255]) + 1.0))


def test_gray_map_noisy_is_monotone():
    rng = np.random.default_rng(1)
    g = np.repeat(np.arange(0, 256, 5.0), 3)
    lux = 10 + g**2 / 50 + rng.normal(0, 40, g.size)
    m = fit_gray_map(np.column_stack([g, lux]))
    assert np.all(np.diff(m.table()) >= 0)
    assert np.all(np.diff(m.lambdas) > 0)


def test_gray_map_rejects_flat():
    with pytest.raises(ValueError):
        fit_gray_map([[0, 5.0], [10, 5.0]])


def test_gray_map_lookups(tmp_path):
    m = GrayToLambdaMap([0, 100, 255], [10.0, 200.0, 4000.0])
    assert m.to_lambda(255) == 4000.0
    assert m.to_gray(200.0) == 100
    assert m.to_gray(5.0) == 0
    assert m.to_gray(1e5) == 255
    assert np.array_equal(m.to_gray(m.to_lambda(m.gray)), m.gray.astype(int))
    m.save(tmp_path / "m.csv")
    back = GrayToLambdaMap.load(tmp_path / "m.csv")
    assert np.array_equal(back.lambdas, m.lambdas) and back.max_gray == 255


def test_gray_map_full_table_round_trip():
    g = np.arange(256.0)
    m = GrayToLambdaMap(g, 50 + 4950 * (g / 255) ** 2.2)
    assert np.array_equal(m.to_gray(m.table()), np.arange(256))


def test_gray_map_validation():
    with pytest.raises(ValueError):
        GrayToLambdaMap([0, 10], [5.0, 5.0])
    with pytest.raises(CurveFormatError):
        GrayToLambdaMap.from_csv("gray,lambda\n0,1\nfoo\n")
