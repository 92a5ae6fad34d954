"""Flipping ratios, action norms, parameter sweeps and case-study tables."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datasets import LabelRule
from .detectors import detect
from .engine import ExactEngine
from .recourse import ActionPolicy, RecourseConfig, TrainLog, train_policy
from .scm import Scm

log = logging.getLogger(__name__)

LAMBDA_GRID = [1.0, 1e-1, 1e-2, 1e-3, 5e-4, 1e-4, 1e-5]
LAMBDA_GRID_AE = LAMBDA_GRID + [1e-6]
ALPHA_GRID = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


def flip_ratio(counterfactuals, detector, tau: float) -> float:
    """Fraction of counterfactual rows the detector calls normal (g <= tau)."""
    x = np.atleast_2d(np.asarray(counterfactuals, dtype=float))
    if len(x) == 0:
        raise ValueError("flip_ratio needs at least one counterfactual")
    return float(np.mean(detector.score(x) <= tau))


def ground_truth_counterfactuals(X, U, theta, scm: Scm) -> np.ndarray:
    if U is None:
        raise ValueError("ground-truth flips need the stored noise record of every row")
    X, U = np.atleast_2d(X), np.atleast_2d(U)
    if U.shape != X.shape:
        raise ValueError(f"noise record shape {U.shape} does not match rows {X.shape}")
    return scm.counterfactual_exact(X, U, theta)


def ground_truth_flip(X, U, theta, scm: Scm, rule: LabelRule) -> tuple[float, np.ndarray]:
    """(ratio, mask) of rows whose ground-truth label becomes normal."""
    cf = ground_truth_counterfactuals(X, U, theta, scm)
    mask = np.asarray(rule.is_normal(cf), dtype=bool)
    return float(mask.mean()), mask


def action_norm_on_flipped(theta, c, flipped) -> tuple[float, float]:
    """Mean and std of ||c * theta||_2 over the flipped rows; NaN when none flipped."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    flipped = np.asarray(flipped, dtype=bool)
    if not flipped.any():
        return float("nan"), float("nan")
    norms = np.linalg.norm(np.asarray(c, dtype=float) * theta[flipped], axis=1)
    return float(norms.mean()), float(norms.std())


@dataclass
class FlipReport:
    n_detected: int
    flip_ratio_detector: float
    flip_ratio_ground_truth: float
    norm_mean: float
    norm_std: float
    norm_on: str = "ground_truth"

    def row(self) -> dict:
        return asdict(self)


@dataclass
class RecourseSetup:
    """Everything a policy run needs besides its own config."""

    nodes: list[str]
    X: np.ndarray  # detected anomalies
    U: np.ndarray  # their stored noise
    detector: object
    tau: float
    engine: object
    scm: Scm
    rule: LabelRule
    actionable: list[str]
    cost: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    # ground-truth labels of the detected rows (1 anomalous); when given, the
    # ground-truth ratio and the norms only count true anomalies
    y: np.ndarray | None = None

    @property
    def true_anomalies(self) -> np.ndarray:
        return np.ones(len(self.X), dtype=bool) if self.y is None else np.asarray(self.y) == 1


def detected_setup(bundle, scm: Scm, rule: LabelRule, actionable, detector, tau: float, engine) -> RecourseSetup:
    """Setup over the unlabeled rows the detector flags (g > tau)."""
    mask = detect(detector.score(bundle.X_unlabeled), tau)
    if not mask.any():
        raise ValueError("the detector flags no unlabeled rows; nothing to explain or repair")
    return RecourseSetup(bundle.nodes, bundle.X_unlabeled[mask], bundle.U_unlabeled[mask], detector, tau, engine,
                         scm, rule, list(actionable), bundle.cost, bundle.mean, bundle.std, bundle.y_unlabeled[mask])


def random_actions(rng, n: int, nodes, actionable, std, scale: float = 0.5) -> np.ndarray:
    """Test actions for engine fidelity: N(0, scale * std_j) on actionable
    coordinates, zero elsewhere."""
    theta = np.zeros((n, len(nodes)))
    idx = [list(nodes).index(a) for a in actionable]
    theta[:, idx] = rng.normal(0.0, 1.0, size=(n, len(idx))) * scale * np.asarray(std, dtype=float)[idx]
    return theta


def evaluate_policy(setup: RecourseSetup, policy: ActionPolicy, norm_on: str = "ground_truth") -> FlipReport:
    theta = policy.predict_action(setup.X)
    cf = ground_truth_counterfactuals(setup.X, setup.U, theta, setup.scm)
    det_mask = setup.detector.score(cf) <= setup.tau
    gt_mask = np.asarray(setup.rule.is_normal(cf), dtype=bool)
    if norm_on not in ("ground_truth", "detector"):
        raise ValueError(f"norm_on must be 'ground_truth' or 'detector', got {norm_on!r}")
    keep = setup.true_anomalies
    gt_ratio = float(gt_mask[keep].mean()) if keep.any() else float("nan")
    flipped = (gt_mask if norm_on == "ground_truth" else det_mask) & keep
    nm, ns = action_norm_on_flipped(theta, setup.cost, flipped)
    return FlipReport(len(setup.X), float(det_mask.mean()), gt_ratio, nm, ns, norm_on)


def run_recourse(setup: RecourseSetup, config: RecourseConfig) -> tuple[ActionPolicy, TrainLog, FlipReport]:
    engine = setup.engine
    if config.engine == "exact" and not isinstance(engine, ExactEngine):
        engine = ExactEngine(setup.scm, setup.mean, setup.std)
    policy, tlog = train_policy(setup.X, setup.detector, setup.tau, engine, config, setup.nodes, setup.actionable,
                                setup.cost, setup.mean, setup.std, U=setup.U)
    return policy, tlog, evaluate_policy(setup, policy)


@dataclass
class SeedSummary:
    """Mean and std of each FlipReport field across seeds."""

    n_runs: int
    reports: list[FlipReport]

    def stat(self, name) -> tuple[float, float]:
        v = np.array([getattr(r, name) for r in self.reports], dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            return float("nan"), float("nan")
        return float(v.mean()), float(v.std())


def run_seeds(setup: RecourseSetup, config: RecourseConfig, seeds) -> SeedSummary:
    reports = [run_recourse(setup, replace(config, seed=int(s)))[2] for s in seeds]
    return SeedSummary(len(reports), reports)


@dataclass
class SweepGrid:
    parameter: str
    values: list[float]
    reports: list[FlipReport | None] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for k, v in enumerate(self.values):
            r = self.reports[k]
            base = {"parameter": self.parameter, "value": v}
            if r is None:
                out.append({**base, "status": "failed: " + self.failures.get(k, "")})
            else:
                out.append({**base, "status": "ok", **r.row()})
        return out


_PARAM_FIELD = {"lambda": "lam", "lam": "lam", "alpha": "alpha"}


def run_sweep(setup: RecourseSetup, parameter: str, values, config: RecourseConfig) -> SweepGrid:
    """Retrain the policy once per value (same seed), sharing detector and engine."""
    if parameter not in _PARAM_FIELD:
        raise ValueError(f"sweep parameter must be lambda or alpha, got {parameter!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    name = "lambda" if _PARAM_FIELD[parameter] == "lam" else "alpha"
    grid = SweepGrid(name, values)
    for k, v in enumerate(values):
        try:
            cfg = replace(config, **{_PARAM_FIELD[parameter]: v})
            grid.reports.append(run_recourse(setup, cfg)[2])
        except Exception as exc:  # keep the rest of the grid
            log.warning("sweep point %s=%g failed: %s", name, v, exc)
            grid.reports.append(None)
            grid.failures[k] = f"{type(exc).__name__}: {exc}"
    return grid


# ------------------------------------------------------------------- output

def write_csv(path, rows: list[dict]):
    if not rows:
        raise ValueError("nothing to write")
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def text_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    lines = [" | ".join(str(h).rjust(w) for h, w in zip(header, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def format_reports(rows: list[dict]) -> str:
    cols = ["parameter", "value", "n_detected", "flip_ratio_detector", "flip_ratio_ground_truth", "norm_mean",
            "norm_std"]
    cols = [c for c in cols if any(c in r for r in rows)]
    body = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    return text_table(cols, body)


def _fmt(v, digits=4):
    if isinstance(v, (float, np.floating)):
        return "undefined" if not np.isfinite(v) else f"{v:.{digits}f}"
    return str(v)


def case_report(nodes, x, theta, x_engine, x_exact, label_fn, actionable, label_name="Y",
                naive_theta=None, naive_exact=None, digits=4) -> str:
    """Per-sample table: factual row, action, engine and ground-truth
    counterfactuals, with the label value in the last column. Non-actionable
    action entries print as "/"."""
    act = set(actionable)

    def vals(v):
        return [_fmt(float(a), digits) for a in np.ravel(v)]

    def acts(t):
        return [_fmt(float(a), digits) if n in act else "/" for n, a in zip(nodes, np.ravel(t))]

    def lab(v):
        return _fmt(float(np.ravel(label_fn(np.atleast_2d(v)))[0]), digits)

    rows = [["x", *vals(x), lab(x)]]
    if naive_theta is not None:
        rows.append(["NaiveAR theta", *acts(naive_theta), "/"])
        if naive_exact is not None:
            rows.append(["NaiveAR x(theta) SCM", *vals(naive_exact), lab(naive_exact)])
    rows.append(["theta", *acts(theta), "/"])
    rows.append(["x(theta) engine", *vals(x_engine), lab(x_engine)])
    rows.append(["x(theta) SCM", *vals(x_exact), lab(x_exact)])
    return text_table(["", *nodes, label_name], rows)
