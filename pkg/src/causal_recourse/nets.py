"""Small building blocks on top of :mod:`diffcore`: dense stacks, optimizers,
and the JSON checkpoint envelope shared by detectors, engines and policies."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import diffcore as dc

ACTIVATIONS = {"tanh": dc.tanh, "relu": dc.relu, "sigmoid": dc.sigmoid, "linear": None}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MLP:
    """Fully connected stack; the activation is applied to every hidden layer
    and ``out_activation`` to the last one."""

    def __init__(self, sizes, rng: np.random.Generator, activation="tanh", out_activation="linear",
                 bias=True, zero_last=False, name="mlp"):
        self.sizes = list(sizes)
        self.activation = activation
        self.out_activation = out_activation
        self.bias = bias
        self.weights: list[dc.Parameter] = []
        self.biases: list[dc.Parameter] = []
        n_layers = len(self.sizes) - 1
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = np.zeros((a, b)) if (zero_last and k == n_layers - 1) else glorot(rng, a, b)
            self.weights.append(dc.Parameter(w, name=f"{name}.w{k}"))
            if bias:
                self.biases.append(dc.Parameter(np.zeros(b), name=f"{name}.b{k}"))

    @property
    def params(self) -> list[dc.Parameter]:
        return self.weights + self.biases

    def __call__(self, tape: dc.Tape, x: dc.Tensor) -> dc.Tensor:
        h = x
        n = len(self.weights)
        for k, w in enumerate(self.weights):
            b = tape.watch(self.biases[k]) if self.bias else None
            h = dc.affine(h, tape.watch(w), b)
            act = ACTIVATIONS[self.activation if k < n - 1 else self.out_activation]
            if act is not None:
                h = act(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        tape = dc.Tape()
        return self(tape, tape.constant(x)).value


class SGD:
    """Fixed-step gradient descent; ``clip_norm`` rescales the joint gradient
    to at most that Euclidean norm before the step."""

    def __init__(self, params, lr: float, clip_norm: float | None = None):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.clip_norm = clip_norm

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def _scale(self) -> float:
        if not self.clip_norm:
            return 1.0
        norm = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params))
        return min(1.0, self.clip_norm / norm) if norm > 0 else 1.0

    def step(self):
        k = self.lr * self._scale()
        for p in self.params:
            p.value = p.value - k * p.grad


class Adam(SGD):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad ** 2
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def freeze(params):
    for p in params:
        p.trainable = False


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_FORMAT = "causal-recourse-checkpoint/1"


def graph_hash(nodes, edges) -> str:
    payload = json.dumps({"nodes": list(nodes), "edges": sorted(map(list, edges))}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_checkpoint(path, kind: str, config: dict, tensors: dict[str, np.ndarray], extra: dict | None = None,
                    graph: str | None = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": config,
        "graph_hash": graph,
        "extra": extra or {},
        "tensors": {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
                    for k, v in tensors.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path, kind: str, graph: str | None = None):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format={doc.get('format')!r})")
    if doc["kind"] != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {doc['kind']}")
    if graph is not None and doc.get("graph_hash") != graph:
        raise ValueError(f"{path}: checkpoint graph hash {doc.get('graph_hash')} does not match {graph}")
    tensors = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["tensors"].items()}
    return doc, tensors
