"""Learned counterfactual engine: a graph-conditioned variational autoencoder.

Every node owns a block of ``hidden`` units. A message-passing round is one
dense layer whose weight matrix is multiplied by the block mask
``kron(A + I, ones(hidden, hidden))``, so node ``i`` only hears from itself and
its parents under the adjacency ``A`` that is passed in. Removing the incoming
edges of a node in ``A`` therefore removes their influence exactly.

All engine arithmetic happens in standardised feature space; public methods
take and return raw feature units.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .nets import Adam, batches, graph_hash, load_checkpoint, save_checkpoint
from .scm import CausalGraph, Scm

log = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    latent_dim: int = 4
    hidden: int = 32
    # message-passing rounds per encoder/decoder; None means the longest
    # directed path of the graph (at least 1), so effects reach every descendant
    rounds: int | None = None
    lr: float = 2e-3
    epochs: int = 40
    batch_size: int = 128
    seed: int = 0
    obs_std: float = 0.1
    # probability that a training batch is encoded/decoded under a randomly
    # mutilated graph, so the networks see the adjacency used at intervention time
    intervention_rate: float = 0.5
    # overwrite every coordinate with the decoder output (no descendant rule)
    literal_overwrite: bool = False

    def __post_init__(self):
        for k in ("latent_dim", "hidden", "lr", "batch_size", "obs_std"):
            if getattr(self, k) <= 0:
                raise ValueError(f"EngineConfig.{k} must be positive")
        if self.rounds is not None and self.rounds <= 0:
            raise ValueError("EngineConfig.rounds must be positive or None")
        if self.epochs < 0:
            raise ValueError("EngineConfig.epochs must be >= 0")


@dataclass
class TrainReport:
    epochs: int
    trained: bool
    losses: list[float] = field(default_factory=list)
    recon_mse: float = float("nan")
    kl_per_node: list[float] = field(default_factory=list)


class UntrainedEngineError(RuntimeError):
    pass


class GraphVAE:
    def __init__(self, graph: CausalGraph, config: EngineConfig, mean=None, std=None):
        self.graph = graph
        self.config = config
        d, w, z = len(graph), config.hidden, config.latent_dim
        self.rounds = config.rounds or max(1, graph.depth())
        self.d = d
        self.mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
        self.std = np.ones(d) if std is None else np.asarray(std, dtype=float)
        self.trained = False
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, dc.Parameter] = {}

        def add(name, shape, fan_in):
            self.params[name] = dc.Parameter(rng.normal(0, 1 / np.sqrt(fan_in), size=shape), name=name)

        def zeros(name, n):
            self.params[name] = dc.Parameter(np.zeros(n), name=name)

        fan_mp = w * (1 + max(1, int(graph.adjacency.sum(axis=0).mean())))
        add("enc.in.w", (d, d * w), 1), zeros("enc.in.b", d * w)
        for r in range(self.rounds):
            add(f"enc.mp{r}.w", (d * w, d * w), fan_mp), zeros(f"enc.mp{r}.b", d * w)
        add("enc.mu.w", (d * w, d * z), w), zeros("enc.mu.b", d * z)
        add("enc.lv.w", (d * w, d * z), w), zeros("enc.lv.b", d * z)
        add("dec.in.w", (d * z, d * w), z), zeros("dec.in.b", d * w)
        for r in range(self.rounds):
            add(f"dec.mp{r}.w", (d * w, d * w), fan_mp), zeros(f"dec.mp{r}.b", d * w)
        add("dec.out.w", (d * w, d), w), zeros("dec.out.b", d)

        eye = np.eye(d)
        self._in_mask = np.kron(eye, np.ones((1, w)))
        self._zin_mask = np.kron(eye, np.ones((z, w)))
        self._head_mask = np.kron(eye, np.ones((w, z)))
        self._out_mask = np.kron(eye, np.ones((w, 1)))
        self._mp_masks: dict[bytes, np.ndarray] = {}
        self._desc = {n: np.array([m in graph.descendants(n) for m in graph.nodes]) for n in graph.nodes}
        self._mutilated = {n: graph.mutilate(n).adjacency for n in graph.nodes}

    # ------------------------------------------------------------- plumbing

    def _mp_mask(self, adjacency):
        key = adjacency.tobytes()
        if key not in self._mp_masks:
            w = self.config.hidden
            self._mp_masks[key] = np.kron(adjacency + np.eye(self.d), np.ones((w, w)))
        return self._mp_masks[key]

    def _lin(self, tape, h, name, mask):
        w = dc.scale(tape.watch(self.params[name + ".w"]), mask)
        return dc.affine(h, w, tape.watch(self.params[name + ".b"]))

    def standardize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def unstandardize(self, xs):
        return np.asarray(xs) * self.std + self.mean

    def encode(self, tape, xs: dc.Tensor, adjacency) -> tuple[dc.Tensor, dc.Tensor]:
        """Posterior mean and log-variance, each (batch, d * latent_dim)."""
        m = self._mp_mask(adjacency)
        h = dc.tanh(self._lin(tape, xs, "enc.in", self._in_mask))
        for r in range(self.rounds):
            h = dc.tanh(self._lin(tape, h, f"enc.mp{r}", m))
        return self._lin(tape, h, "enc.mu", self._head_mask), self._lin(tape, h, "enc.lv", self._head_mask)

    def decode(self, tape, z: dc.Tensor, adjacency) -> dc.Tensor:
        m = self._mp_mask(adjacency)
        h = dc.tanh(self._lin(tape, z, "dec.in", self._zin_mask))
        for r in range(self.rounds):
            h = dc.tanh(self._lin(tape, h, f"dec.mp{r}", m))
        return self._lin(tape, h, "dec.out", self._out_mask)

    def elbo_terms(self, tape, xs: np.ndarray, eps: np.ndarray, adjacency):
        x = tape.constant(xs)
        mu, lv = self.encode(tape, x, adjacency)
        z = dc.add(mu, dc.mul(dc.exp(dc.scale(lv, 0.5)), tape.constant(eps)))
        xhat = self.decode(tape, z, adjacency)
        n = xs.shape[0]
        rec = dc.scale(dc.sum(dc.square(dc.sub(x, xhat))), 1.0 / (2 * self.config.obs_std ** 2 * n))
        kl_el = dc.sub(dc.add(dc.exp(lv), dc.square(mu)), dc.add(lv, tape.constant(np.ones_like(lv.value))))
        kl = dc.scale(dc.sum(kl_el), 0.5 / n)
        return rec, kl, xhat, kl_el

    # --------------------------------------------------------- intervention

    def _require_trained(self):
        if not self.trained:
            raise UntrainedEngineError("engine has not been trained")

    def hard_step(self, tape, xs: dc.Tensor, node: str, value: dc.Tensor) -> dc.Tensor:
        """One hard intervention ``do(node = value)`` in standardised space.

        ``value`` is a (batch, d) tensor; only its ``node`` column is used.
        """
        i = self.graph.index[node]
        zsz = self.config.latent_dim
        a = self.graph.adjacency
        a_bar = self._mutilated[node]
        col = np.zeros(self.d)
        col[i] = 1.0
        x_bar = dc.blend(value, xs, col)
        z, _ = self.encode(tape, xs, a)
        z_bar, _ = self.encode(tape, x_bar, a_bar)
        block = np.zeros(self.d * zsz)
        block[i * zsz:(i + 1) * zsz] = 1.0
        z_tilde = dc.blend(z_bar, z, block)
        x_dec = self.decode(tape, z_tilde, a_bar)
        if self.config.literal_overwrite:
            return x_dec
        desc = self._desc[node].astype(float)
        return dc.add(dc.blend(x_dec, xs, desc), dc.scale(dc.sub(x_bar, xs), col))

    def soft_steps(self, tape, xs: dc.Tensor, theta_s: dc.Tensor, actionable) -> dc.Tensor:
        """Iterated hard interventions x_i <- x_i + theta_i along ``actionable``."""
        for node in actionable:
            xs = self.hard_step(tape, xs, node, dc.add(xs, theta_s))
        return xs

    def check_order(self, actionable):
        pos = [self.graph.order.index(n) for n in actionable]
        if pos != sorted(pos):
            raise ValueError(f"actionable nodes {list(actionable)} are not in topological order {self.graph.order}")

    def counterfactual_hard(self, x, node: str, value) -> np.ndarray:
        self._require_trained()
        if node not in self.graph.index:
            raise KeyError(f"unknown node {node!r}")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tape = dc.Tape()
        v = np.array(x, dtype=float)
        v[:, self.graph.index[node]] = value
        out = self.hard_step(tape, tape.constant(self.standardize(x)), node, tape.constant(self.standardize(v)))
        res = self.unstandardize(out.value)
        if not self.config.literal_overwrite:
            res[:, self.graph.index[node]] = v[:, self.graph.index[node]]
            keep = ~self._desc[node]
            keep[self.graph.index[node]] = False
            res[:, keep] = x[:, keep]
        return res

    def counterfactual_soft(self, x, theta, actionable) -> np.ndarray:
        """Numeric wrapper over :meth:`soft_tensor`; raw units in and out."""
        tape = dc.Tape()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.soft_tensor(tape, tape.constant(self.standardize(x)),
                               tape.constant(np.atleast_2d(theta) / self.std), actionable)
        res = self.unstandardize(out.value)
        if not self.config.literal_overwrite:
            untouched = ~np.isin(np.arange(self.d), self._affected(actionable))
            res[:, untouched] = x[:, untouched]
        return res

    def soft_tensor(self, tape, xs: dc.Tensor, theta_s: dc.Tensor, actionable) -> dc.Tensor:
        self._require_trained()
        self.check_order(actionable)
        return self.soft_steps(tape, xs, theta_s, actionable)

    def _affected(self, actionable):
        idx = set()
        for n in actionable:
            idx.add(self.graph.index[n])
            idx |= {self.graph.index[m] for m in self.graph.descendants(n)}
        return sorted(idx)

    # --------------------------------------------------------------- storage

    def save(self, path):
        save_checkpoint(path, "engine", {"engine": asdict(self.config), "nodes": self.graph.nodes,
                                         "edges": [list(e) for e in self.graph.edges]},
                        {**{k: p.value for k, p in self.params.items()}, "mean": self.mean, "std": self.std},
                        {"trained": self.trained}, graph_hash(self.graph.nodes, self.graph.edges))

    @classmethod
    def load(cls, path, graph: CausalGraph) -> "GraphVAE":
        doc, tensors = load_checkpoint(path, "engine", graph_hash(graph.nodes, graph.edges))
        eng = cls(graph, EngineConfig(**doc["config"]["engine"]), tensors.pop("mean"), tensors.pop("std"))
        for k, v in tensors.items():
            eng.params[k].value = v
        eng.trained = bool(doc["extra"].get("trained"))
        return eng


class DivergenceError(RuntimeError):
    pass


def train_engine(X: np.ndarray, graph: CausalGraph, config: EngineConfig | None = None, mean=None, std=None,
                 callback=None) -> tuple[GraphVAE, TrainReport]:
    """Fit the graph VAE by maximising the ELBO (reparameterised, one sample)."""
    config = config or EngineConfig()
    X = np.asarray(X, dtype=float)
    if X.shape[1] != len(graph):
        raise ValueError(f"X has {X.shape[1]} columns but the graph has {len(graph)} nodes")
    mean = X.mean(axis=0) if mean is None else mean
    std = X.std(axis=0) if std is None else std
    eng = GraphVAE(graph, config, mean, np.maximum(std, 1e-9))
    report = TrainReport(config.epochs, config.epochs > 0)
    if config.epochs == 0:
        return eng, report
    xs_all = eng.standardize(X)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(eng.params.values(), lr=config.lr)
    nodes = graph.nodes
    for epoch in range(config.epochs):
        tot, nb = 0.0, 0
        for b, idx in enumerate(batches(len(xs_all), config.batch_size, rng)):
            xs = xs_all[idx]
            adj = graph.adjacency
            if rng.random() < config.intervention_rate:
                adj = eng._mutilated[nodes[rng.integers(len(nodes))]]
            eps = rng.standard_normal((len(idx), eng.d * config.latent_dim))
            tape = dc.Tape()
            rec, kl, _, _ = eng.elbo_terms(tape, xs, eps, adj)
            loss = dc.add(rec, kl)
            if not np.isfinite(loss.value):
                raise DivergenceError(f"engine loss became non-finite at epoch {epoch}, batch {b}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            tot += float(loss.value)
            nb += 1
        report.losses.append(tot / nb)
        log.info("engine epoch %d loss %.4f", epoch, tot / nb)
        if callback:
            callback(epoch, eng, tot / nb)
    eng.trained = True
    mse, kl_nodes = reconstruction_stats(eng, X)
    report.recon_mse, report.kl_per_node = mse, kl_nodes
    return eng, report


def reconstruction_stats(eng: GraphVAE, X: np.ndarray):
    """Mean squared reconstruction error (standardised, posterior mean) and
    the average KL per node."""
    xs = eng.standardize(X)
    tape = dc.Tape()
    mu, lv = eng.encode(tape, tape.constant(xs), eng.graph.adjacency)
    xhat = eng.decode(tape, mu, eng.graph.adjacency).value
    z = eng.config.latent_dim
    kl = 0.5 * (np.exp(lv.value) + mu.value ** 2 - 1 - lv.value)
    kl_nodes = kl.reshape(len(xs), eng.d, z).sum(axis=2).mean(axis=0)
    return float(((xs - xhat) ** 2).mean()), kl_nodes.tolist()


class ExactEngine:
    """The ground-truth SCM with stored noise, behind the engine interface."""

    def __init__(self, scm: Scm, mean=None, std=None):
        self.scm = scm
        self.graph = scm.graph
        self.d = scm.d
        self.mean = np.zeros(self.d) if mean is None else np.asarray(mean, dtype=float)
        self.std = np.ones(self.d) if std is None else np.asarray(std, dtype=float)
        self.trained = True

    def counterfactual_soft(self, x, theta, actionable, u=None) -> np.ndarray:
        if u is None:
            u = self.scm.abduct_residual(x)
        return self.scm.counterfactual_exact(x, u, theta)

    def counterfactual_hard(self, x, node, value, u=None):
        x = np.atleast_2d(x)
        if u is None:
            u = self.scm.abduct_residual(x)
        self.scm.check_consistent(x, u)
        return self.scm.simulate(u, hard={node: value})


def cf_fidelity(engine, scm: Scm, X: np.ndarray, U: np.ndarray, theta: np.ndarray, actionable) -> tuple[float, float]:
    """(MSE, SSE): mean and standard deviation over rows of the squared
    Euclidean distance between engine and exact counterfactuals, raw units."""
    X = np.atleast_2d(X)
    if len(X) == 0:
        raise ValueError("cf_fidelity needs at least one test pair")
    exact = scm.counterfactual_exact(X, U, theta)
    if isinstance(engine, ExactEngine):
        est = engine.counterfactual_soft(X, theta, actionable, u=U)
    else:
        est = engine.counterfactual_soft(X, theta, actionable)
    se = ((est - exact) ** 2).sum(axis=1)
    return float(se.mean()), float(se.std())
