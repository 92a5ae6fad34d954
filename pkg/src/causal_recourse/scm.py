"""Structural causal models: graphs, mechanisms, sampling, and exact
abduction-action-prediction counterfactuals.

Mechanisms are vectorised callables ``fn(values, noise) -> column`` where
``values`` maps node name to the column of already evaluated parents and
``noise`` maps node name to that node's exogenous column. A soft intervention
shifts the node's own exogenous input::

    x_i(theta) = f_i(x_pa(theta), u_i + theta_i)

which equals ``f_i(x_pa(theta), u_i) + theta_i`` whenever the mechanism is
additive in its noise. Mechanisms that do not read their own noise get the
shift added to their output instead.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .streams import Noise, draw_noise


class CycleError(ValueError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("causal graph has a cycle: " + " -> ".join(self.cycle + self.cycle[:1]))


class InconsistentAbductionError(ValueError):
    def __init__(self, residuals: dict[str, float]):
        self.residuals = residuals
        worst = ", ".join(f"{k}={v:.3g}" for k, v in residuals.items() if v > 0)
        super().__init__(f"exogenous record does not reproduce the factual row (max |residual| per node: {worst})")


class CausalGraph:
    """DAG over named nodes. ``adjacency[p, c] == 1`` iff p -> c."""

    def __init__(self, nodes, edges=()):
        self.nodes = list(nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError(f"duplicate node names in {self.nodes}")
        self.index = {n: i for i, n in enumerate(self.nodes)}
        self.edges = []
        for p, c in edges:
            if p not in self.index or c not in self.index:
                raise ValueError(f"edge {p}->{c} references an unknown node")
            if (p, c) not in self.edges:
                self.edges.append((p, c))
        d = len(self.nodes)
        self.adjacency = np.zeros((d, d), dtype=np.int8)
        for p, c in self.edges:
            self.adjacency[self.index[p], self.index[c]] = 1
        self.order = topo_order(self)

    def __len__(self):
        return len(self.nodes)

    def parents(self, node) -> list[str]:
        j = self.index[node]
        return [self.nodes[i] for i in np.flatnonzero(self.adjacency[:, j])]

    def children(self, node) -> list[str]:
        i = self.index[node]
        return [self.nodes[j] for j in np.flatnonzero(self.adjacency[i])]

    def descendants(self, node) -> set[str]:
        seen, stack = set(), [node]
        while stack:
            for c in self.children(stack.pop()):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return seen

    def depth(self) -> int:
        """Number of edges on the longest directed path."""
        level = {}
        for n in self.order:
            level[n] = max((level[p] + 1 for p in self.parents(n)), default=0)
        return max(level.values(), default=0)

    def mutilate(self, node) -> "CausalGraph":
        """Graph with every incoming edge of ``node`` removed (hard intervention)."""
        if node not in self.index:
            raise KeyError(f"unknown node {node!r}")
        return CausalGraph(self.nodes, [(p, c) for p, c in self.edges if c != node])

    def __eq__(self, other):
        return isinstance(other, CausalGraph) and self.nodes == other.nodes and set(self.edges) == set(other.edges)

    def __repr__(self):
        return f"CausalGraph({self.nodes}, {len(self.edges)} edges)"


def topo_order(graph: CausalGraph) -> list[str]:
    """Kahn's algorithm; among ready nodes the smallest index goes first."""
    nodes, adj = graph.nodes, graph.adjacency
    indeg = adj.sum(axis=0).astype(int)
    ready = [i for i in range(len(nodes)) if indeg[i] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        i = heapq.heappop(ready)
        out.append(nodes[i])
        for j in np.flatnonzero(adj[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, int(j))
    if len(out) < len(nodes):
        raise CycleError(_find_cycle(nodes, adj, set(out)))
    return out


def _find_cycle(nodes, adj, done):
    remaining = [i for i, n in enumerate(nodes) if n not in done]
    # every remaining node has a remaining parent; walk parents until a repeat
    cur, path, pos = remaining[0], [], {}
    while cur not in pos:
        pos[cur] = len(path)
        path.append(cur)
        cur = next(int(p) for p in np.flatnonzero(adj[:, cur]) if nodes[p] not in done)
    cyc = path[pos[cur]:][::-1]
    return [nodes[i] for i in cyc]


@dataclass(frozen=True)
class Mechanism:
    node: str
    parents: tuple[str, ...]
    fn: Callable[[dict, dict], np.ndarray]
    noise: Noise
    additive: bool = True
    noise_inputs: tuple[str, ...] = ()
    payload: dict = field(default_factory=dict)

    def __call__(self, values: dict, noise: dict) -> np.ndarray:
        return self.fn(values, noise)


@dataclass(frozen=True)
class Intervention:
    kind: str  # "hard" | "soft"
    node: str
    value: float

    def __post_init__(self):
        if self.kind not in ("hard", "soft"):
            raise ValueError(f"intervention kind must be hard or soft, got {self.kind!r}")
        if not np.isfinite(self.value):
            raise ValueError("intervention value must be finite")


@dataclass
class SampleDiagnostics:
    redrawn_rows: int = 0
    attempts: int = 0


class Scm:
    def __init__(self, graph: CausalGraph, mechanisms: dict[str, Mechanism], name: str = "scm"):
        self.graph = graph
        self.name = name
        missing = set(graph.nodes) - set(mechanisms)
        extra = set(mechanisms) - set(graph.nodes)
        if missing or extra:
            raise ValueError(f"mechanisms must cover nodes exactly (missing={sorted(missing)}, extra={sorted(extra)})")
        for n, m in mechanisms.items():
            if set(m.parents) != set(graph.parents(n)):
                raise ValueError(f"mechanism {n} parents {sorted(m.parents)} disagree with graph {graph.parents(n)}")
        self.mechanisms = mechanisms
        self.nodes = graph.nodes
        self.order = graph.order
        self.noises = [mechanisms[n].noise for n in self.nodes]

    @property
    def d(self):
        return len(self.nodes)

    @property
    def is_additive(self):
        return all(m.additive for m in self.mechanisms.values())

    def _cols(self, a):
        return {n: a[:, i] for i, n in enumerate(self.nodes)}

    def simulate(self, u, theta=None, hard: dict[str, float] | None = None) -> np.ndarray:
        """Evaluate mechanisms in topological order from exogenous draws ``u``.

        ``theta`` is the per-node soft intervention; ``hard`` pins nodes to
        constants.
        """
        u = np.asarray(u, dtype=np.float64)
        single = u.ndim == 1
        u = np.atleast_2d(u)
        th = None if theta is None else np.atleast_2d(np.asarray(theta, dtype=np.float64))
        noise = self._cols(u)
        values: dict[str, np.ndarray] = {}
        for n in self.order:
            if hard and n in hard:
                col = np.full(u.shape[0], float(hard[n]))
            else:
                mech = self.mechanisms[n]
                shift = None if th is None else th[:, self.graph.index[n]]
                own = n in mech.noise_inputs
                nz = noise if shift is None or not own else {**noise, n: noise[n] + shift}
                col = np.asarray(mech(values, nz), dtype=np.float64)
                col = np.broadcast_to(col, (u.shape[0],)).copy()
                if shift is not None and not own:
                    col = col + shift
            values[n] = col
        x = np.stack([values[n] for n in self.nodes], axis=1)
        return x[0] if single else x

    def sample(self, n: int, seed: int, start: int = 0, max_attempts: int = 100):
        """Draw ``n`` rows; returns (X, U, diagnostics).

        Rows whose mechanisms produce non-finite values are redrawn from the
        next attempt of the same row stream.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        rows = np.arange(start, start + n)
        diag = SampleDiagnostics()
        U = draw_noise(self.noises, seed, rows)
        with np.errstate(all="ignore"):
            X = self.simulate(U)
        for attempt in range(1, max_attempts + 1):
            bad = ~np.all(np.isfinite(X), axis=1)
            if not bad.any():
                break
            diag.redrawn_rows += int(bad.sum())
            diag.attempts = attempt
            U[bad] = draw_noise(self.noises, seed, rows[bad], attempt)
            with np.errstate(all="ignore"):
                X[bad] = self.simulate(U[bad])
        else:
            raise FloatingPointError(f"{self.name}: rows still non-finite after {max_attempts} redraws")
        return X, U, diag

    def abduct_residual(self, x) -> np.ndarray:
        """u_i = x_i - f_i(x_pa, 0); only valid for additive-noise mechanisms."""
        bad = [n for n, m in self.mechanisms.items() if not m.additive]
        if bad:
            raise ValueError(f"residual abduction needs additive mechanisms; non-additive: {bad}")
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        values = self._cols(x)
        zeros = {n: np.zeros(x.shape[0]) for n in self.nodes}
        u = np.stack([x[:, i] - np.broadcast_to(self.mechanisms[n](values, zeros), (x.shape[0],))
                      for i, n in enumerate(self.nodes)], axis=1)
        return u[0] if single else u

    def check_consistent(self, x, u, tol: float = 1e-9):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with np.errstate(all="ignore"):
            resid = np.abs(self.simulate(np.atleast_2d(u)) - x)
        limit = tol * np.maximum(1.0, np.abs(x))
        if not np.all(resid <= limit):
            raise InconsistentAbductionError({n: float(resid[:, i].max()) for i, n in enumerate(self.nodes)})

    def counterfactual_exact(self, x, u, theta, check: bool = True) -> np.ndarray:
        """Abduction (stored noise), action (shift by theta), prediction."""
        theta = np.asarray(theta, dtype=np.float64)
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        if check:
            self.check_consistent(x, u)
        return self.simulate(u, theta)

    def to_json(self) -> dict:
        mechs = {}
        for n in self.nodes:
            m = self.mechanisms[n]
            if not m.payload:
                raise ValueError(f"mechanism {n} has no serialisable payload")
            mechs[n] = m.payload
        return {
            "name": self.name,
            "nodes": self.nodes,
            "edges": [list(e) for e in self.graph.edges],
            "mechanisms": mechs,
            "noise": {n: self.mechanisms[n].noise.to_json() for n in self.nodes},
        }


def apply_hard_intervention(graph: CausalGraph, node: str) -> CausalGraph:
    return graph.mutilate(node)


def is_additive_numerically(mech: Mechanism, values: dict, rng: np.random.Generator, n: int) -> bool:
    u = {k: rng.normal(size=n) for k in set(mech.noise_inputs) | {mech.node}}
    z = {k: np.zeros(n) for k in u}
    return bool(np.allclose(mech(values, u), mech(values, z) + u[mech.node], atol=1e-9))


# ----------------------------------------------------------- mechanism catalog

def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _linear_part(values, payload):
    out = payload.get("intercept", 0.0)
    for p, c in payload.get("coefficients", {}).items():
        out = out + c * values[p]
    return out


def _catalog_fn(node: str, payload: dict):
    kind = payload["type"]
    if kind == "linear":
        return lambda v, u: _linear_part(v, payload) + u[node]
    if kind == "logistic":
        s = payload.get("scale", 1.0)
        return lambda v, u: s * _sigmoid(_linear_part(v, payload)) + u[node]
    if kind == "exp":
        s = payload.get("scale", 1.0)
        return lambda v, u: s * np.exp(_linear_part(v, payload)) + u[node]
    if kind == "clamp":
        lo, hi = payload.get("low", -np.inf), payload.get("high", np.inf)
        return lambda v, u: np.clip(_linear_part(v, payload), lo, hi) + u[node]
    if kind == "product":
        c = payload.get("coefficient", 1.0)
        ps = payload["parents"]

        def prod(v, u):
            out = c
            for p in ps:
                out = out * v[p]
            return out + u[node]
        return prod
    if kind == "indicator-threshold":
        p, t, val = payload["parent"], payload["threshold"], payload.get("value", 1.0)
        return lambda v, u: val * (v[p] > t) + u[node]
    raise ValueError(f"unknown mechanism type {kind!r}")


def _catalog_parents(payload: dict) -> tuple[str, ...]:
    kind = payload["type"]
    if kind == "product":
        return tuple(payload["parents"])
    if kind == "indicator-threshold":
        return (payload["parent"],)
    return tuple(payload.get("coefficients", {}))


BUILTIN_MECHANISMS: dict[str, Callable[[], Mechanism]] = {}


def catalog_mechanism(node: str, payload: dict, noise: Noise) -> Mechanism:
    if payload["type"] == "builtin":
        from . import datasets  # noqa: F401  registers the built-in mechanisms

        try:
            return BUILTIN_MECHANISMS[payload["name"]]()
        except KeyError:
            raise ValueError(f"unknown built-in mechanism {payload['name']!r}") from None
    return Mechanism(node, _catalog_parents(payload), _catalog_fn(node, payload), noise, True, (), dict(payload))


def scm_from_json(doc: dict) -> Scm:
    graph = CausalGraph(doc["nodes"], [tuple(e) for e in doc["edges"]])
    noise_docs = doc.get("noise", {})
    mechs = {}
    for n in graph.nodes:
        payload = doc["mechanisms"][n]
        noise = Noise.from_json(noise_docs.get(n, {"dist": "normal", "mean": 0.0, "std": 1.0}))
        mechs[n] = catalog_mechanism(n, payload, noise)
    return Scm(graph, mechs, doc.get("name", "custom"))


def load_scm(path) -> Scm:
    return scm_from_json(json.loads(Path(path).read_text()))
