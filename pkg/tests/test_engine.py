import numpy as np
import pytest

from causal_recourse import diffcore as dc
from causal_recourse import datasets as ds
from causal_recourse.engine import (EngineConfig, ExactEngine, GraphVAE, UntrainedEngineError, cf_fidelity,
                                    train_engine)
from causal_recourse.scm import CausalGraph, scm_from_json

from conftest import chain_doc, toy3_doc


@pytest.fixture(scope="module")
def chain_engine():
    scm = scm_from_json(chain_doc())
    X, U, _ = scm.sample(4000, seed=0)
    eng, report = train_engine(X, scm.graph, EngineConfig(epochs=40, seed=0))
    return scm, eng, report


def _untrained(graph, seed=0):
    eng = GraphVAE(graph, EngineConfig(seed=seed, hidden=8, latent_dim=2))
    eng.trained = True  # random weights are enough for structural properties
    return eng


def test_zero_epochs_returns_untrained_engine():
    g = CausalGraph(["a", "b"], [("a", "b")])
    eng, report = train_engine(np.random.default_rng(0).normal(size=(50, 2)), g, EngineConfig(epochs=0))
    assert not report.trained and not eng.trained
    with pytest.raises(UntrainedEngineError):
        eng.counterfactual_hard(np.zeros(2), "a", 1.0)


def test_training_is_deterministic():
    g = CausalGraph(["a", "b"], [("a", "b")])
    X = np.random.default_rng(0).normal(size=(300, 2))
    cfg = EngineConfig(epochs=2, hidden=8, seed=3)
    a, _ = train_engine(X, g, cfg)
    b, _ = train_engine(X, g, cfg)
    for k in a.params:
        assert a.params[k].value.tobytes() == b.params[k].value.tobytes()


def test_edge_masking_removes_parent_influence():
    g = CausalGraph(["A", "B", "C"], [("A", "B"), ("B", "C"), ("A", "C")])
    eng = _untrained(g)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    cut = g.mutilate("C").adjacency
    for adj in (cut, np.zeros_like(cut)):
        y = x.copy()
        y[:, 0] += 3.0  # perturb A
        tape = dc.Tape()
        mu_x, _ = eng.encode(tape, tape.constant(x), adj)
        mu_y, _ = eng.encode(tape, tape.constant(y), adj)
        z = eng.config.latent_dim
        c = slice(2 * z, 3 * z)
        if adj.sum() == 0:
            np.testing.assert_array_equal(mu_x.value[:, z:], mu_y.value[:, z:])
        else:
            # C lost its parents; B still hears from A
            np.testing.assert_array_equal(mu_x.value[:, c], mu_y.value[:, c])
            assert not np.allclose(mu_x.value[:, z:2 * z], mu_y.value[:, z:2 * z])


def test_hard_intervention_locality():
    scm = scm_from_json(toy3_doc())
    eng = _untrained(scm.graph)
    X, _, _ = scm.sample(20, seed=1)
    out = eng.counterfactual_hard(X, "B", 0.7)
    assert np.all(out[:, 1] == 0.7)
    assert out[:, 0].tobytes() == X[:, 0].tobytes()  # A is not a descendant of B
    assert not np.allclose(out[:, 2], X[:, 2])


def test_soft_tensor_untouched_coordinates():
    scm = scm_from_json(toy3_doc())
    eng = _untrained(scm.graph)
    X, _, _ = scm.sample(10, seed=2)
    theta = np.zeros_like(X)
    theta[:, 2] = 1.0
    out = eng.counterfactual_soft(X, theta, ["C"])
    np.testing.assert_array_equal(out[:, :2], X[:, :2])


def test_actionable_order_is_checked():
    eng = _untrained(scm_from_json(toy3_doc()).graph)
    with pytest.raises(ValueError, match="topological"):
        eng.counterfactual_soft(np.zeros((1, 3)), np.zeros((1, 3)), ["C", "A"])


def test_single_actionable_equals_one_hard_call():
    scm = scm_from_json(toy3_doc())
    eng = _untrained(scm.graph)
    X, _, _ = scm.sample(10, seed=4)
    theta = np.zeros_like(X)
    theta[:, 1] = 0.8
    soft = eng.counterfactual_soft(X, theta, ["B"])
    hard = eng.counterfactual_hard(X, "B", X[:, 1] + 0.8)
    np.testing.assert_allclose(soft, hard, atol=1e-12)


def test_soft_intervention_gradient_matches_finite_differences():
    scm = scm_from_json(toy3_doc())
    eng = _untrained(scm.graph, seed=5)
    X, _, _ = scm.sample(4, seed=3)
    xs = eng.standardize(X)
    w = np.random.default_rng(1).normal(size=X.shape)

    def f(tape, th):
        out = eng.soft_tensor(tape, tape.constant(xs), th, ["A", "B"])
        return dc.sum(dc.mul(out, tape.constant(w)))

    theta0 = np.random.default_rng(2).normal(size=X.shape) * 0.3
    theta0[:, 2] = 0.0
    assert dc.grad_check(f, theta0, 1e-6) <= 1e-3


def test_checkpoint_round_trip_and_graph_hash(tmp_path):
    scm = scm_from_json(toy3_doc())
    eng = _untrained(scm.graph)
    eng.save(tmp_path / "e.json")
    back = GraphVAE.load(tmp_path / "e.json", scm.graph)
    x = np.ones((2, 3))
    th = np.full((2, 3), 0.5)
    np.testing.assert_array_equal(back.counterfactual_soft(x, th, ["A", "B", "C"]),
                                  eng.counterfactual_soft(x, th, ["A", "B", "C"]))
    with pytest.raises(ValueError, match="graph hash"):
        GraphVAE.load(tmp_path / "e.json", CausalGraph(["A", "B", "C"], [("A", "B")]))


def test_exact_engine_fidelity_is_zero():
    scm = ds.loan_scm()
    X, U, _ = scm.sample(200, seed=0)
    theta = np.zeros_like(X)
    theta[:, 3:] = np.random.default_rng(0).normal(size=(200, 4))
    mse, sse = cf_fidelity(ExactEngine(scm), scm, X, U, theta, ["L", "D", "I", "S"])
    assert mse == 0.0 and sse == 0.0
    with pytest.raises(ValueError):
        cf_fidelity(ExactEngine(scm), scm, X[:0], U[:0], theta[:0], ["L"])


def test_chain_engine_matches_oracle(chain_engine):
    scm, eng, report = chain_engine
    assert report.trained and report.recon_mse < 0.5
    X, U, _ = scm.sample(500, seed=99, start=10_000)
    rng = np.random.default_rng(0)
    theta = np.zeros_like(X)
    theta[:, 0] = rng.normal(0, 1.0, size=500)
    exact = scm.counterfactual_exact(X, U, theta)
    est = eng.counterfactual_soft(X, theta, ["X1"])
    err = (est - exact) / eng.std
    assert np.sqrt((err ** 2).mean()) <= 0.2
    # root intervention moves the child in the direction of the positive coefficient
    up = eng.counterfactual_hard(X, "X1", X[:, 0] + 2.0)
    assert np.mean(up[:, 1] > X[:, 1]) > 0.95


def test_chain_engine_identity_intervention(chain_engine):
    scm, eng, _ = chain_engine
    X, _, _ = scm.sample(200, seed=98, start=20_000)
    for out in (eng.counterfactual_hard(X, "X1", X[:, 0]), eng.counterfactual_soft(X, np.zeros_like(X), ["X1", "X2"])):
        err = np.abs(out - X) / eng.std
        assert np.all(np.sqrt((err ** 2).mean(axis=0)) <= 0.15)
        assert np.all(np.quantile(err, 0.95, axis=0) <= 0.15)


def test_elbo_decreases_early():
    b = ds.gen_loan(2000, 10, 10, seed=0)
    _, report = train_engine(b.X_train, ds.loan_scm().graph, EngineConfig(epochs=5, seed=0), b.mean, b.std)
    assert all(report.losses[i + 1] <= report.losses[i] for i in range(4))
