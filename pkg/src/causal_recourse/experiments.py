"""Desk-scale experiment pipeline shared by the scripts and the acceptance tests.

Each helper trains one artifact with the tuned defaults below, optionally
caching checkpoints in a directory so repeated runs skip retraining.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import detectors as D
from . import evaluation as ev
from .engine import EngineConfig, ExactEngine, GraphVAE, cf_fidelity, train_engine
from .recourse import RecourseConfig

# detector overrides per dataset on top of detectors.default_config
DETECTOR_OVERRIDES = {
    ("adult", "ae"): dict(ae_sizes=(64, 32, 2, 32, 64)),
}

# recourse defaults per dataset (lambda 1e-3 throughout)
RECOURSE_DEFAULTS = {
    "loan": dict(alpha=0.5, lr=0.3, epochs=40),
    "adult": dict(alpha=0.3, lr=0.05, epochs=40, clip_norm=1.0),
}


@dataclass
class Problem:
    name: str
    bundle: ds.DatasetBundle
    scm: object
    rule: ds.LabelRule
    actionable: list[str]


def problem(name: str, seed: int = 1, sizes=(10_000, 10_000, 1_000)) -> Problem:
    gen = ds.gen_loan if name == "loan" else ds.gen_adult
    bundle = gen(*sizes, seed=seed)
    scm, rule, act = ds.builtin(name)
    return Problem(name, bundle, scm, rule, act)


def detector_config(name: str, kind: str, **overrides) -> D.DetectorConfig:
    return D.default_config(kind, **{**DETECTOR_OVERRIDES.get((name, kind), {}), **overrides})


def recourse_config(name: str, **overrides) -> RecourseConfig:
    return RecourseConfig(**{**RECOURSE_DEFAULTS[name], **overrides})


def _cached(cache, fname):
    return None if cache is None else Path(cache) / fname


def detector(p: Problem, kind: str, cache=None, **overrides):
    """(detector, tau, seconds spent training; 0 when loaded)."""
    path = _cached(cache, f"{p.name}_{kind}.json")
    t = time.perf_counter()
    if path is not None and path.exists():
        det, secs = D.load_detector(path), 0.0
    else:
        det = D.train_detector(p.bundle.X_train, detector_config(p.name, kind, **overrides), p.bundle.mean,
                               p.bundle.std)
        secs = time.perf_counter() - t
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            det.save(path)
    return det, D.calibrate_threshold(det, p.bundle.X_train).tau, secs


def engine(p: Problem, cache=None, **overrides):
    """(learned engine, seconds spent training; 0 when loaded)."""
    path = _cached(cache, f"{p.name}_engine.json")
    if path is not None and path.exists():
        return GraphVAE.load(path, p.scm.graph), 0.0
    t = time.perf_counter()
    eng, _ = train_engine(p.bundle.X_train, p.scm.graph, EngineConfig(**overrides), p.bundle.mean, p.bundle.std)
    secs = time.perf_counter() - t
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        eng.save(path)
    return eng, secs


def setup(p: Problem, det, tau, eng) -> ev.RecourseSetup:
    return ev.detected_setup(p.bundle, p.scm, p.rule, p.actionable, det, tau, eng)


def fidelity(p: Problem, eng, n: int = 1000, seed: int = 0) -> dict:
    """Engine vs exact counterfactuals on unlabeled rows under random actions,
    plus the standardized identity-intervention RMS."""
    b = p.bundle
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(b.X_unlabeled), size=min(n, len(b.X_unlabeled)), replace=False)
    X, U = b.X_unlabeled[rows], b.U_unlabeled[rows]
    theta = ev.random_actions(rng, len(X), b.nodes, p.actionable, b.std)
    mse, sse = cf_fidelity(eng, p.scm, X, U, theta, p.actionable)
    ident = eng.counterfactual_soft(X, np.zeros_like(X), p.actionable)
    rms = np.sqrt((((ident - X) / b.std) ** 2).mean(axis=0))
    return {"mse": mse, "sse": sse, "identity_rms": rms}


def compare_baselines(s: ev.RecourseSetup, config: RecourseConfig, seeds) -> dict:
    """ADCAR and NaiveAR reports per seed at an otherwise identical config."""
    out = {"adcar": [], "naive": []}
    for seed in seeds:
        for base in out:
            cfg = replace(config, seed=int(seed), baseline=base)
            out[base].append(ev.run_recourse(s, cfg)[2])
    return out


def exact_setup(s: ev.RecourseSetup) -> ev.RecourseSetup:
    return replace(s, engine=ExactEngine(s.scm, s.mean, s.std))
