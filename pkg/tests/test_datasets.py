import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_recourse import datasets as ds

LOAN_X = np.array([0, 7.7065, -0.0707, 6.8254, 7.9987, -1.8513, -3.5468])
LOAN_ADCAR_THETA = np.array([0, -0.5249, 0.0507, -0.8103, -1.9816, 7.0584, 6.0115])
LOAN_ADCAR_SCM = np.array([0, 7.1817, -0.0611, 6.0408, 5.1799, 5.1546, 10.1966])
LOAN_NAIVE_THETA = np.array([0, -1.7600, -0.9793, -9.0191, -12.8538, -1.8034, 9.9861])
LOAN_NAIVE_SCM = np.array([0, 5.9466, -0.2864, -2.1294, -13.9860, -3.8308, 6.4393])

ADULT_ROWS = {
    52304: [1, 77.7101, 3, 1, 21.9036, 0, 3, 0, 2, 2],
    55000: [1, 25.0257, 3, 1, -5.7988, 45.0100, 3, 0, 2, 2],
    42816: [1, 89.6108, 3, 1, 6.1346, 0, 3, 0, 2, 2],
}


def _loan_row(**kw):
    x = LOAN_X.copy()
    for k, v in kw.items():
        x[ds.LOAN_NODES.index(k)] = v
    return x


def abduct_loan(x):
    """Invert each Loan mechanism by hand (E through its logistic)."""
    scm = ds.loan_scm()
    vals = {n: np.array([x[i]]) for i, n in enumerate(scm.nodes)}
    zeros = {n: np.zeros(1) for n in scm.nodes}
    u = np.zeros(7)
    for i, n in enumerate(scm.nodes):
        if n == "E":
            a = 1 - 0.5 * x[0] - ds.sigmoid(0.1 * x[1])
            u[i] = a - np.log(1 / (x[2] + 0.5) - 1)
        else:
            u[i] = x[i] - scm.mechanisms[n](vals, zeros)[0]
    return u


def test_loan_label_case_study_values():
    assert ds.loan_label(LOAN_X) == pytest.approx(0.0164, abs=1e-3)
    assert ds.loan_label(_loan_row(L=6.0408, D=5.1799, I=5.1546, S=10.1966)) == pytest.approx(1.0, abs=1e-3)
    assert ds.loan_label(_loan_row(L=-2.1294, D=-13.9860, I=-3.8308, S=6.4393)) == pytest.approx(0.1439, abs=1e-3)


def test_loan_case_study_counterfactual_rows():
    scm = ds.loan_scm()
    u = abduct_loan(LOAN_X)
    np.testing.assert_allclose(scm.simulate(u), LOAN_X, atol=1e-12)
    # table entries are rounded to 4 decimals; errors propagate through children
    np.testing.assert_allclose(scm.counterfactual_exact(LOAN_X, u, LOAN_ADCAR_THETA), LOAN_ADCAR_SCM, atol=2e-4)
    np.testing.assert_allclose(scm.counterfactual_exact(LOAN_X, u, LOAN_NAIVE_THETA), LOAN_NAIVE_SCM, atol=2e-4)


def test_outer_e_form_is_available():
    scm = ds.loan_scm(e_form="outer")
    X, U, _ = scm.sample(200, seed=0)
    e = X[:, 2]
    assert np.all(np.isfinite(e))
    assert e.max() <= -0.5 + 1 / ds.E_DENOMINATOR_FLOOR + 1e-9
    with pytest.raises(ValueError):
        ds.loan_scm(e_form="other")


@pytest.mark.parametrize("income", sorted(ADULT_ROWS))
def test_adult_income_case_study_values(income):
    assert ds.adult_income(np.array(ADULT_ROWS[income], dtype=float)) == income


def test_adult_income_is_piecewise_constant():
    X, _, _ = ds.adult_scm().sample(2000, seed=5)
    X = np.concatenate([X, np.array(list(ADULT_ROWS.values()), dtype=float)])
    base = ds.adult_income(X)
    thresholds = {1: 30.0, 4: 10.0, 5: 45.0}  # A, E, H
    for j, t in thresholds.items():
        far = np.abs(X[:, j] - t) > 1e-5
        for step in (1e-6, -1e-6):
            Y = X.copy()
            Y[:, j] += step
            assert np.array_equal(ds.adult_income(Y)[far], base[far])


@pytest.fixture(scope="module")
def small_loan():
    return ds.gen_loan(300, 200, 20, seed=3)


def test_bundle_counts_and_ratio(small_loan):
    assert small_loan.counts() == (300, 200, 20)
    b = ds.gen_adult(100, 100, 10, seed=1)
    assert b.counts() == (100, 100, 10)


def test_full_size_counts():
    b = ds.gen_loan(10_000, 10_000, 1_000, seed=0)
    assert b.counts() == (10_000, 10_000, 1_000)
    assert (b.y_unlabeled == 1).sum() * 10 == (b.y_unlabeled == 0).sum()


def test_labels_match_rule(small_loan):
    rule = ds.LOAN_RULE
    assert rule.is_normal(small_loan.X_train).all()
    y = small_loan.y_unlabeled
    assert rule.is_anomaly(small_loan.X_unlabeled[y == 1]).all()
    assert rule.is_normal(small_loan.X_unlabeled[y == 0]).all()
    both = rule.is_normal(small_loan.X_unlabeled) & rule.is_anomaly(small_loan.X_unlabeled)
    assert not both.any()


def test_loan_structural_equations():
    b = ds.gen_loan(1000, 10, 10, seed=7)
    scm = ds.loan_scm()
    np.testing.assert_allclose(scm.simulate(b.U_train), b.X_train, rtol=0, atol=1e-9)
    # independent re-evaluation of the structural equations
    G, A, E, L, D, I, S = b.X_train.T
    uG, uA, uE, uL, uD, uI, uS = b.U_train.T
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    np.testing.assert_allclose(A, -35 + uA, atol=1e-9)
    np.testing.assert_allclose(E, -0.5 + 1 / (1 + np.exp(1 - 0.5 * G - sig(0.1 * A) - uE)), atol=1e-9)
    np.testing.assert_allclose(L, 1 + 0.01 * (A - 5) * (5 - A) + G + uL, atol=1e-9)
    np.testing.assert_allclose(D, -1 + 0.1 * A + 2 * G + L + uD, atol=1e-9)
    np.testing.assert_allclose(I, -4 + 0.1 * (A + 35) + 2 * G + G * E + uI, atol=1e-9)
    np.testing.assert_allclose(S, -4 + 1.5 * np.where(I > 0, I, 0) + uS, atol=1e-9)


def test_loan_age_is_centred():
    X, _, _ = ds.loan_scm().sample(10_000, seed=0)
    assert -0.6 <= X[:, 1].mean() <= 0.6


def test_adult_generator_properties():
    scm = ds.adult_scm()
    X, U, _ = scm.sample(5000, seed=2)
    A, H = X[:, 1], X[:, 5]
    assert np.all(H[A >= 70] == 0)
    np.testing.assert_allclose(scm.simulate(U), X, rtol=0, atol=1e-9)
    assert np.all(np.isfinite(X))


def test_std_is_positive_and_from_train(small_loan):
    assert np.all(small_loan.cost > 0)
    np.testing.assert_array_equal(small_loan.std, small_loan.X_train.std(axis=0))


def test_io_round_trip_is_bit_exact(small_loan, tmp_path):
    ds.write_bundle(small_loan, tmp_path)
    back = ds.read_bundle(tmp_path)
    for f in ("X_train", "U_train", "X_unlabeled", "U_unlabeled", "y_unlabeled", "raw_train", "raw_unlabeled"):
        assert getattr(back, f).tobytes() == getattr(small_loan, f).tobytes(), f
    assert back.nodes == small_loan.nodes and back.name == "loan"


def test_io_three_row_bundle(tmp_path):
    b = ds.DatasetBundle("custom", ["a", "b"], np.array([[0.1, 1 / 3]]), np.array([[1.0, 2.0]]),
                         np.array([[1e-300, -2.5], [3.0, 4.0]]), np.zeros((2, 2)), np.array([0, 1]),
                         np.array([0.5]), np.array([0.25, 0.75]))
    ds.write_bundle(b, tmp_path)
    back = ds.read_bundle(tmp_path)
    assert back.X_unlabeled.tobytes() == b.X_unlabeled.tobytes()
    assert back.X_train.tobytes() == b.X_train.tobytes()


def test_io_errors(small_loan, tmp_path):
    ds.write_bundle(small_loan, tmp_path / "a")
    (tmp_path / "a" / "train_noise.csv").unlink()
    with pytest.raises(FileNotFoundError, match="train_noise.csv"):
        ds.read_bundle(tmp_path / "a")

    ds.write_bundle(small_loan, tmp_path / "b")
    f = tmp_path / "b" / "unlabeled_features.csv"
    lines = f.read_text().splitlines()
    head = lines[0].split(",")
    head[0], head[1] = head[1], head[0]
    f.write_text("\n".join([",".join(head)] + lines[1:]) + "\n")
    with pytest.raises(ds.SchemaError, match="unlabeled_features.csv:1"):
        ds.read_bundle(tmp_path / "b")

    ds.write_bundle(small_loan, tmp_path / "c")
    lab = tmp_path / "c" / "train_labels.csv"
    lab.write_text("\n".join(lab.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(ds.SchemaError, match="train_labels.csv"):
        ds.read_bundle(tmp_path / "c")


def test_bad_counts_rejected():
    with pytest.raises(ValueError):
        ds.gen_loan(0, 10, 10)


def test_generation_aborts_on_low_acceptance():
    impossible = ds.LabelRule("Y", ds.loan_label, -1.0, 2.0, anomaly_high=False)
    with pytest.raises(ds.GenerationError, match="acceptance rate"):
        ds.generate_bundle(ds.loan_scm(), impossible, 5, 5, 5, seed=0, chunk=20_000, window=40_000)


def test_generation_is_deterministic():
    a = ds.gen_loan(50, 50, 5, seed=9)
    b = ds.gen_loan(50, 50, 5, seed=9)
    assert a.X_unlabeled.tobytes() == b.X_unlabeled.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([0.0, 1.0]), st.floats(-20, 20))
def test_adult_sex_code_is_binary(sex, um):
    assert float(ds.sex_code(np.array([sex]), np.array([um]))[0]) in (0.0, 1.0)


def test_row_mode_ties_go_to_smallest():
    cols = [np.array([1.0, 2.0]), np.array([2.0, 2.0]), np.array([3.0, 1.0])]
    np.testing.assert_array_equal(ds.row_mode(cols), [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=7, max_size=7))
def test_loan_label_is_a_probability(x):
    y = float(ds.loan_label(np.array(x)))
    assert 0.0 <= y <= 1.0
