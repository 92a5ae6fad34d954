"""Counter-based random streams and exogenous noise distributions.

Every generated row owns an independent stream whose key depends only on
``(seed, row, attempt)``::

    key(seed, row, attempt) = sm(sm(sm(seed) ^ row) ^ attempt)
    uniform(key, slot)      = (top 53 bits of sm(key + (slot + 1) * GOLDEN) + 0.5) / 2**53

where ``sm`` is the splitmix64 finaliser and ``GOLDEN = 0x9E3779B97F4A7C15``.
Rows can therefore be produced in any order, or in parallel, and come out
byte-identical to a sequential run. Noise values are obtained by inverse-CDF
transforms of these uniforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
SLOTS_PER_NOISE = 2


def splitmix64(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.uint64) + GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def row_keys(seed: int, rows, attempt=0) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.uint64)
    s = splitmix64(np.full(rows.shape, seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
    a = np.broadcast_to(np.asarray(attempt, dtype=np.uint64), rows.shape)
    return splitmix64(splitmix64(s ^ rows) ^ a)


def uniforms(keys: np.ndarray, n_slots: int) -> np.ndarray:
    """(len(keys), n_slots) uniforms strictly inside (0, 1)."""
    slots = (np.arange(1, n_slots + 1, dtype=np.uint64) * GOLDEN)[None, :]
    bits = splitmix64(keys[:, None] + slots) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0 ** -53


def sub_seed(seed: int, name: str) -> int:
    """Named sub-stream of a root seed (data, detector, engine, policy...)."""
    h = np.uint64(0)
    for ch in name.encode():
        h = splitmix64(np.asarray([h ^ np.uint64(ch)]))[0]
    return int(splitmix64(np.asarray([np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ h]))[0] >> np.uint64(1))


@dataclass(frozen=True)
class Noise:
    """Distribution of one exogenous variable.

    kinds: ``normal(mean, std)``, ``bernoulli(p)``, ``gamma(shape, scale)``,
    ``categorical(probs)``, ``mixture_normal(weights, means, stds)``,
    ``uniform(low, high)``, ``constant(value)``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def transform(self, u: np.ndarray) -> np.ndarray:
        """Map a (n, SLOTS_PER_NOISE) block of uniforms to n draws."""
        p = self.params
        u0 = u[:, 0]
        if self.kind == "normal":
            return p.get("mean", 0.0) + p.get("std", 1.0) * special.ndtri(u0)
        if self.kind == "bernoulli":
            return (u0 < p["p"]).astype(np.float64)
        if self.kind == "gamma":
            return special.gammaincinv(p["shape"], u0) * p["scale"]
        if self.kind == "categorical":
            cdf = np.cumsum(p["probs"])
            cdf = cdf / cdf[-1]
            return np.minimum(np.searchsorted(cdf, u0, side="right"), len(cdf) - 1).astype(np.float64)
        if self.kind == "mixture_normal":
            w = np.cumsum(p["weights"])
            comp = np.minimum(np.searchsorted(w / w[-1], u0, side="right"), len(w) - 1)
            means = np.asarray(p["means"], dtype=float)
            stds = np.asarray(p["stds"], dtype=float)
            return means[comp] + stds[comp] * special.ndtri(u[:, 1])
        if self.kind == "uniform":
            return p["low"] + (p["high"] - p["low"]) * u0
        if self.kind == "constant":
            return np.full(u.shape[0], float(p["value"]))
        raise ValueError(f"unknown noise kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"dist": self.kind, **self.params}

    @classmethod
    def from_json(cls, doc: dict) -> "Noise":
        doc = dict(doc)
        kind = doc.pop("dist")
        if kind not in {"normal", "bernoulli", "gamma", "categorical", "mixture_normal", "uniform", "constant"}:
            raise ValueError(f"unknown noise kind {kind!r}")
        return cls(kind, doc)


def draw_noise(noises: list[Noise], seed: int, rows, attempt=0) -> np.ndarray:
    """Exogenous draws for the given row indices, one column per noise."""
    rows = np.atleast_1d(np.asarray(rows))
    u = uniforms(row_keys(seed, rows, attempt), SLOTS_PER_NOISE * len(noises))
    cols = [nz.transform(u[:, SLOTS_PER_NOISE * k: SLOTS_PER_NOISE * (k + 1)]) for k, nz in enumerate(noises)]
    return np.stack(cols, axis=1) if cols else np.zeros((len(rows), 0))
