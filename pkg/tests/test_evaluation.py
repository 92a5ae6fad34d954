import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_recourse import datasets as ds
from causal_recourse import detectors as D
from causal_recourse import evaluation as ev
from causal_recourse import recourse as R
from causal_recourse.engine import ExactEngine
from causal_recourse.scm import scm_from_json

from conftest import toy3_doc
from test_datasets import LOAN_ADCAR_THETA, LOAN_NAIVE_THETA, LOAN_X, abduct_loan

ADULT_X = np.array([1, 77.7101, 3, 1, 21.9036, 0, 3, 0, 2, 2.0])
ADULT_ADCAR_THETA = np.array([0, 11.9007, 0, 0, -15.7691, -20.6169, 0, 0, 0, 0])
ADULT_NAIVE_THETA = np.array([0, -52.6844, 0, 0, -15.0569, 24.2759, 0, 0, 0, 0])


class FixedScores:
    """Detector stand-in whose score is the first column."""

    def score(self, x):
        return np.atleast_2d(x)[:, 0]


def abduct_adult(x):
    """Noise for the Adult case row: roots read their noise, E is additive,
    and every discrete child comes out right with zero noise (H is 0 for A >= 70)."""
    scm = ds.adult_scm()
    u = np.zeros(10)
    u[[0, 2, 3]] = x[[0, 2, 3]]
    u[1] = x[1] - 17.0
    u[4] = x[4] - scm.simulate(u)[4]
    return u


# ------------------------------------------------------------ flip ratios

def test_flip_ratio_examples():
    det = FixedScores()
    assert ev.flip_ratio(np.array([[0.1], [0.2]]), det, 1.0) == 1.0
    assert ev.flip_ratio(np.arange(10.0)[:, None], det, 6.5) == 0.7
    assert ev.flip_ratio(np.array([[1.0], [2.0]]), det, 1.0) == 0.5  # equal to tau is normal
    with pytest.raises(ValueError):
        ev.flip_ratio(np.zeros((0, 1)), det, 1.0)


def test_ground_truth_flip_zero_action():
    b = ds.gen_loan(50, 50, 30, seed=0)
    anom = b.y_unlabeled == 1
    X, U = b.X_unlabeled[anom], b.U_unlabeled[anom]
    ratio, mask = ev.ground_truth_flip(X, U, np.zeros_like(X), ds.loan_scm(), ds.LOAN_RULE)
    assert ratio == 0.0 and not mask.any()
    with pytest.raises(ValueError, match="noise"):
        ev.ground_truth_flip(X, None, np.zeros_like(X), ds.loan_scm(), ds.LOAN_RULE)


def test_loan_case_flips():
    u = abduct_loan(LOAN_X)
    scm = ds.loan_scm()
    ratio, _ = ev.ground_truth_flip(LOAN_X, u, LOAN_ADCAR_THETA, scm, ds.LOAN_RULE)
    assert ratio == 1.0
    ratio, _ = ev.ground_truth_flip(LOAN_X, u, LOAN_NAIVE_THETA, scm, ds.LOAN_RULE)
    assert ratio == 0.0


def test_adult_case_flips():
    scm = ds.adult_scm()
    u = abduct_adult(ADULT_X)
    np.testing.assert_allclose(scm.simulate(u), ADULT_X, atol=1e-12)
    cf = scm.counterfactual_exact(ADULT_X, u, ADULT_ADCAR_THETA)
    np.testing.assert_allclose(cf, [1, 89.6108, 3, 1, 6.1346, 0, 3, 0, 2, 2], atol=2e-4)
    assert ev.ground_truth_flip(ADULT_X, u, ADULT_ADCAR_THETA, scm, ds.ADULT_RULE)[0] == 1.0
    # the naive action keeps the income above the line
    assert ds.adult_income(scm.counterfactual_exact(ADULT_X, u, ADULT_NAIVE_THETA)) == 55000
    assert ev.ground_truth_flip(ADULT_X, u, ADULT_NAIVE_THETA, scm, ds.ADULT_RULE)[0] == 0.0


# ------------------------------------------------------------------ norms

def test_action_norm_examples():
    m, s = ev.action_norm_on_flipped([[1.0, 2.0]], [2.0, 1.0], [True])
    assert m == pytest.approx(np.sqrt(8.0), abs=1e-12) and round(m, 3) == 2.828 and s == 0.0
    m, s = ev.action_norm_on_flipped(np.zeros((3, 2)), [2.0, 1.0], [True, True, False])
    assert (m, s) == (0.0, 0.0)
    m, s = ev.action_norm_on_flipped([[1.0, 2.0], [5.0, 5.0]], [1.0, 1.0], [False, True])
    assert m == pytest.approx(np.sqrt(50)) and s == 0.0
    m, s = ev.action_norm_on_flipped([[1.0, 2.0]], [1.0, 1.0], [False])
    assert np.isnan(m) and np.isnan(s)
    assert ev._fmt(m) == "undefined"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.booleans()), min_size=1, max_size=30))
def test_norm_stats_are_valid(rows):
    theta = np.array([r[:2] for r in rows])
    mask = np.array([r[2] for r in rows])
    m, s = ev.action_norm_on_flipped(theta, [1.5, 0.5], mask)
    if mask.any():
        assert m >= 0 and s >= 0
    else:
        assert np.isnan(m)


# ---------------------------------------------------------- policy reports

@pytest.fixture(scope="module")
def toy_setup():
    scm = scm_from_json(toy3_doc())
    X, _, _ = scm.sample(600, seed=0)
    det = D.train_ae(X, D.DetectorConfig(kind="ae", epochs=10, ae_sizes=(8, 2, 8)))
    tau = D.calibrate_threshold(det, X, 0.9).tau
    Xp, Up, _ = scm.sample(1500, seed=1)
    hit = det.score(Xp) > tau
    rule = ds.LabelRule("C", lambda x: np.asarray(x)[..., 2], 1.0, 1.0, anomaly_high=True)
    y = rule.is_anomaly(Xp[hit]).astype(int)
    return ev.RecourseSetup(scm.nodes, Xp[hit], Up[hit], det, tau, ExactEngine(scm), scm, rule, ["A", "B"],
                            X.std(axis=0), X.mean(axis=0), X.std(axis=0), y)


def test_zero_policy_flips_nothing(toy_setup):
    pol = R.ActionPolicy(toy_setup.nodes, toy_setup.actionable, toy_setup.mean, toy_setup.std, (8,))
    rep = ev.evaluate_policy(toy_setup, pol)
    assert rep.flip_ratio_detector == 0.0 and rep.flip_ratio_ground_truth == 0.0
    assert np.isnan(rep.norm_mean) and rep.n_detected == len(toy_setup.X)
    with pytest.raises(ValueError):
        ev.evaluate_policy(toy_setup, pol, norm_on="other")


def test_trained_report_ratios_in_range(toy_setup):
    cfg = R.RecourseConfig(epochs=5, hidden=(16,), engine="exact", lr=0.1)
    _, _, rep = ev.run_recourse(toy_setup, cfg)
    assert 0 <= rep.flip_ratio_detector <= 1 and 0 <= rep.flip_ratio_ground_truth <= 1
    assert rep.flip_ratio_detector > 0
    summ = ev.run_seeds(toy_setup, cfg, [0, 1])
    assert summ.n_runs == 2 and summ.stat("flip_ratio_detector")[1] >= 0


# ----------------------------------------------------------------- sweeps

def test_grids_echo_configuration():
    assert ev.LAMBDA_GRID == [1.0, 1e-1, 1e-2, 1e-3, 5e-4, 1e-4, 1e-5]
    assert ev.LAMBDA_GRID_AE == ev.LAMBDA_GRID + [1e-6]
    assert len(ev.ALPHA_GRID) == 9 and ev.ALPHA_GRID[0] == 0.1 and ev.ALPHA_GRID[-1] == 0.9


def test_sweep_values_and_failure_markers(toy_setup, monkeypatch):
    cfg = R.RecourseConfig(epochs=1, hidden=(8,), engine="exact")
    grid = ev.run_sweep(toy_setup, "lambda", [1.0, 1e-3], cfg)
    assert grid.values == [1.0, 1e-3] and all(r is not None for r in grid.reports)

    real = ev.run_recourse

    def flaky(setup, config):
        if config.alpha == 0.5:
            raise R.NonFiniteLossError("boom")
        return real(setup, config)

    monkeypatch.setattr(ev, "run_recourse", flaky)
    grid = ev.run_sweep(toy_setup, "alpha", [0.3, 0.5, 0.7], cfg)
    rows = grid.rows()
    assert [r["status"] for r in rows] == ["ok", "failed: NonFiniteLossError: boom", "ok"]
    with pytest.raises(ValueError):
        ev.run_sweep(toy_setup, "lr", [0.1], cfg)
    with pytest.raises(ValueError):
        ev.run_sweep(toy_setup, "alpha", [], cfg)


def test_csv_and_text_output(tmp_path):
    rows = [{"parameter": "lambda", "value": 0.1, "n_detected": 3, "flip_ratio_detector": 1 / 3,
             "flip_ratio_ground_truth": 0.0, "norm_mean": float("nan"), "norm_std": float("nan")}]
    ev.write_csv(tmp_path / "r.csv", rows)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("parameter,value,n_detected")
    assert repr(1 / 3) in lines[1]
    text = ev.format_reports(rows)
    assert "undefined" in text and "0.3333" in text
    with pytest.raises(ValueError):
        ev.write_csv(tmp_path / "e.csv", [])


# ------------------------------------------------------------- case report

def test_case_report_loan():
    scm = ds.loan_scm()
    u = abduct_loan(LOAN_X)
    exact = scm.counterfactual_exact(LOAN_X, u, LOAN_ADCAR_THETA)
    text = ev.case_report(ds.LOAN_NODES, LOAN_X, LOAN_ADCAR_THETA, exact, exact, ds.loan_label,
                          ds.LOAN_ACTIONABLE)
    lines = text.splitlines()
    assert [l.split("|")[0].strip() for l in lines[2:]] == ["x", "theta", "x(theta) engine", "x(theta) SCM"]
    assert lines[2].split("|")[-1].strip() == "0.0164"
    assert lines[-1].split("|")[-1].strip() == "1.0000"
    theta_cells = [c.strip() for c in lines[3].split("|")[1:]]
    for n, cell in zip(ds.LOAN_NODES, theta_cells):
        assert (cell == "/") == (n not in ds.LOAN_ACTIONABLE)
    # the SCM row prints exactly the exact counterfactual
    assert [c.strip() for c in lines[-1].split("|")[1:-1]] == [f"{v:.4f}" for v in exact]
