"""Action policy, the hinge-plus-cost recourse objective, and the policy
training loop for the causal (ADCAR) and additive (NaiveAR) variants."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .detectors import AeDetector, SvddDetector
from .engine import ExactEngine, GraphVAE
from .nets import MLP, SGD, batches, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "mean_loss", "mean_hinge", "mean_cost"]


@dataclass
class RecourseConfig:
    lam: float = 1e-3
    alpha: float = 0.5
    lr: float = 0.05
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    # cap on the gradient norm of each step; None means unclipped
    clip_norm: float | None = None
    engine: str = "learned"  # "learned" | "exact"
    baseline: str = "adcar"  # "adcar" | "naive"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.engine not in ("learned", "exact"):
            raise ValueError(f"engine must be 'learned' or 'exact', got {self.engine!r}")
        if self.baseline not in ("adcar", "naive"):
            raise ValueError(f"baseline must be 'adcar' or 'naive', got {self.baseline!r}")
        self.hidden = tuple(self.hidden)

    def schedule(self) -> dict:
        """Everything except the counterfactual route; equal for paired runs."""
        d = asdict(self)
        d.pop("baseline")
        d.pop("engine")
        return d


class NonFiniteLossError(RuntimeError):
    pass


# --------------------------------------------------------------------- policy

class ActionPolicy:
    """h_phi: standardised x -> actions on the actionable coordinates, in raw
    units. Outputs are scattered into a d-vector through a constant matrix, so
    non-actionable coordinates are exactly zero."""

    def __init__(self, nodes, actionable, mean, std, hidden=(128, 128), seed: int = 0):
        self.nodes = list(nodes)
        self.actionable = [n for n in self.nodes if n in set(actionable)]
        unknown = set(actionable) - set(self.nodes)
        if unknown:
            raise ValueError(f"actionable nodes {sorted(unknown)} are not features")
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.hidden = tuple(hidden)
        d, k = len(self.nodes), len(self.actionable)
        self.scatter = np.zeros((max(k, 1), d))
        for r, n in enumerate(self.actionable):
            self.scatter[r, self.nodes.index(n)] = self.std[self.nodes.index(n)]
        rng = np.random.default_rng(seed)
        # an empty actionable set keeps a dummy output whose scatter row is zero
        self.net = MLP([d, *self.hidden, max(k, 1)], rng, activation="relu", zero_last=True, name="policy")

    @property
    def params(self):
        return self.net.params

    @property
    def mask(self) -> np.ndarray:
        return np.isin(self.nodes, self.actionable)

    def theta_tensor(self, tape: dc.Tape, x: np.ndarray) -> dc.Tensor:
        xs = tape.constant((np.atleast_2d(x) - self.mean) / self.std)
        return dc.affine(self.net(tape, xs), tape.constant(self.scatter))

    def predict_action(self, x) -> np.ndarray:
        return self.theta_tensor(dc.Tape(), x).value

    def save(self, path, config: RecourseConfig | None = None):
        save_checkpoint(path, "policy", {"nodes": self.nodes, "actionable": self.actionable, "hidden": list(self.hidden),
                                         "recourse": asdict(config) if config else None},
                        {**{p.name: p.value for p in self.params}, "mean": self.mean, "std": self.std})

    @classmethod
    def load(cls, path) -> "ActionPolicy":
        doc, t = load_checkpoint(path, "policy")
        cfg = doc["config"]
        pol = cls(cfg["nodes"], cfg["actionable"], t.pop("mean"), t.pop("std"), cfg["hidden"])
        for p in pol.params:
            p.value = t[p.name]
        return pol


def predict_action(policy: ActionPolicy, x) -> np.ndarray:
    return policy.predict_action(x)


def naive_counterfactual(x, theta) -> np.ndarray:
    """x + theta without propagation to descendants."""
    return np.asarray(x, dtype=float) + np.asarray(theta, dtype=float)


# ----------------------------------------------------------------- objective

def recourse_loss(g, tau: float, alpha: float, lam: float, c, theta):
    """max(g - alpha*tau, 0) + lam * ||c * theta||_2, averaged over rows.

    Works on plain arrays (returns a float) or on tape tensors (returns a
    scalar tensor); ``g`` has one entry per row of ``theta``.
    """
    if tau <= 0:
        raise ValueError("threshold tau must be positive")
    c = np.asarray(c, dtype=float)
    if not isinstance(g, dc.Tensor):
        g = np.atleast_1d(np.asarray(g, dtype=float))
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        per = np.maximum(g - alpha * tau, 0.0) + lam * np.linalg.norm(c * th, axis=1)
        return float(per.mean())
    hinge, cost = _loss_parts(g, tau, alpha, c, theta)
    n = g.shape[0]
    return dc.scale(dc.add(dc.sum(hinge), dc.scale(dc.sum(cost), lam)), 1.0 / n)


def _loss_parts(g: dc.Tensor, tau, alpha, c, theta: dc.Tensor):
    tape = g.tape
    hinge = dc.hinge_max0(dc.sub(g, tape.constant(np.full(g.shape, alpha * tau))))
    cost = dc.l2norm(dc.scale(theta, np.broadcast_to(c, theta.shape)), axis=1)
    return hinge, cost


def _score(detector, kind, x_cf: dc.Tensor) -> dc.Tensor:
    if not isinstance(detector, kind):
        raise TypeError(f"expected a {kind.__name__}, got {type(detector).__name__}")
    return detector.score_tensor(x_cf.tape, x_cf)


def loss_svdd(detector: SvddDetector, x_cf: dc.Tensor, tau, alpha, lam, c, theta: dc.Tensor) -> dc.Tensor:
    """Recourse loss with g = ||r(x(theta)) - mu||_2."""
    return recourse_loss(_score(detector, SvddDetector, x_cf), tau, alpha, lam, c, theta)


def loss_ae(detector: AeDetector, x_cf: dc.Tensor, tau, alpha, lam, c, theta: dc.Tensor) -> dc.Tensor:
    """Recourse loss with g = ||x(theta) - reconstruction(x(theta))||_2."""
    return recourse_loss(_score(detector, AeDetector, x_cf), tau, alpha, lam, c, theta)


# ------------------------------------------------------------ counterfactuals

def exact_counterfactual_tensor(engine: ExactEngine, x: np.ndarray, u: np.ndarray, theta: dc.Tensor,
                                actionable, eps: float = 1e-5) -> dc.Tensor:
    """Ground-truth counterfactual as a tape op; its Jacobian with respect to
    the actionable coordinates of theta comes from central differences."""
    scm = engine.scm
    th = theta.value
    value = scm.counterfactual_exact(x, u, th, check=False)
    idx = [scm.graph.index[n] for n in actionable]
    jac = np.zeros((len(x), len(idx), scm.d))
    for k, j in enumerate(idx):
        step = np.zeros_like(th)
        step[:, j] = eps
        hi = scm.counterfactual_exact(x, u, th + step, check=False)
        lo = scm.counterfactual_exact(x, u, th - step, check=False)
        jac[:, k] = (hi - lo) / (2 * eps)

    def vjp(g):
        out = np.zeros_like(th)
        out[:, idx] = np.einsum("nkd,nd->nk", jac, g)
        return (out,)

    return theta.tape.record("scm_counterfactual", (theta,), value, vjp)


def topological(engine, actionable) -> list[str]:
    """Actionable nodes in the causal graph's topological order."""
    wanted = set(actionable)
    return [n for n in engine.graph.order if n in wanted]


def counterfactual_tensor(engine, x: np.ndarray, theta: dc.Tensor, actionable, baseline: str = "adcar",
                          u: np.ndarray | None = None) -> dc.Tensor:
    """x(theta) on the tape, raw units."""
    tape = theta.tape
    actionable = topological(engine, actionable) if engine is not None else list(actionable)
    if baseline == "naive":
        return dc.add(tape.constant(x), theta)
    if isinstance(engine, ExactEngine):
        if u is None:
            raise ValueError("the exact engine needs stored noise for every row")
        return exact_counterfactual_tensor(engine, x, u, theta, actionable)
    if not isinstance(engine, GraphVAE):
        raise TypeError(f"unsupported engine {type(engine).__name__}")
    xs = tape.constant(engine.standardize(x))
    ts = dc.scale(theta, np.broadcast_to(1.0 / engine.std, theta.shape))
    out = engine.soft_tensor(tape, xs, ts, actionable)
    return dc.add(dc.scale(out, np.broadcast_to(engine.std, out.shape)), tape.constant(np.broadcast_to(engine.mean, out.shape)))


# ------------------------------------------------------------------- training

@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for e, l, h, c in self.rows:
                w.writerow([e, repr(l), repr(h), repr(c)])

    @property
    def mean_loss(self) -> list[float]:
        return [r[1] for r in self.rows]


def batch_loss(policy: ActionPolicy, detector, engine, x, tau, config: RecourseConfig, cost, u=None, index=None):
    """(loss tensor, mean hinge, mean cost, tape) for one batch of rows.

    ``index`` holds the dataset row of each batch row, used only in the
    error raised when a score is not finite (the hinge would hide a NaN).
    """
    tape = dc.Tape()
    theta = policy.theta_tensor(tape, x)
    x_cf = counterfactual_tensor(engine, x, theta, policy.actionable, config.baseline, u)
    g = detector.score_tensor(tape, x_cf)
    bad = ~np.isfinite(g.value) | ~np.all(np.isfinite(theta.value), axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        row = row if index is None else int(index[row])
        raise NonFiniteLossError(f"recourse loss is non-finite at sample index {row}")
    hinge, cst = _loss_parts(g, tau, config.alpha, np.asarray(cost, dtype=float), theta)
    n = len(x)
    loss = dc.scale(dc.add(dc.sum(hinge), dc.scale(dc.sum(cst), config.lam)), 1.0 / n)
    return loss, float(hinge.value.mean()), float(cst.value.mean()), tape


def train_policy(X_detected, detector, tau: float, engine, config: RecourseConfig, nodes, actionable, cost,
                 mean, std, U=None, callback=None) -> tuple[ActionPolicy, TrainLog]:
    """Fit h_phi by plain gradient descent on the recourse loss over the
    detected anomalies. ``U`` (stored noise) is needed only with the exact engine."""
    X = np.atleast_2d(np.asarray(X_detected, dtype=float))
    if len(X) == 0:
        raise ValueError("no detected anomalies to train on")
    policy = ActionPolicy(nodes, actionable, mean, std, config.hidden, config.seed)
    opt = SGD(policy.params, config.lr, config.clip_norm)
    rng = np.random.default_rng(config.seed + 1)
    tlog = TrainLog()
    for epoch in range(config.epochs):
        tot = hin = cst = 0.0
        for idx in batches(len(X), config.batch_size, rng):
            u = None if U is None else U[idx]
            loss, h, c, tape = batch_loss(policy, detector, engine, X[idx], tau, config, cost, u, idx)
            if not np.isfinite(loss.value):
                raise NonFiniteLossError(f"recourse loss became non-finite in epoch {epoch} at sample index {int(idx[0])}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            w = len(idx) / len(X)
            tot += float(loss.value) * w
            hin += h * w
            cst += c * w
        tlog.rows.append((epoch, tot, hin, cst))
        log.info("policy epoch %d loss %.5f hinge %.5f cost %.5f", epoch, tot, hin, cst)
        if callback:
            callback(epoch, policy, tot)
    return policy, tlog
