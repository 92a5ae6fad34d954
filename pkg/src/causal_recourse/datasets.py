"""Loan and Adult data-generating SCMs, their label rules, dataset assembly
with a 1:10 anomaly ratio, and CSV persistence."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scm import BUILTIN_MECHANISMS, CausalGraph, Mechanism, Scm
from .streams import Noise, draw_noise, sub_seed


def sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(v, dtype=np.float64)))


def _ind(cond):
    return np.asarray(cond, dtype=np.float64)


# ----------------------------------------------------------------------- Loan

LOAN_NODES = ["G", "A", "E", "L", "D", "I", "S"]
LOAN_ACTIONABLE = ["L", "D", "I", "S"]
LOAN_CASE_ACTIONABLE = ["A", "E", "L", "D", "I", "S"]
E_DENOMINATOR_FLOOR = 1e-3


def _loan_e(v, u):
    return -0.5 + 1.0 / (1.0 + np.exp(1.0 - 0.5 * v["G"] - sigmoid(0.1 * v["A"]) - u["E"]))


def _loan_e_outer(v, u):
    # U_E outside the exponential; the denominator goes negative for large U_E
    denom = 1.0 + np.exp(1.0 - 0.5 * v["G"] - sigmoid(0.1 * v["A"])) - u["E"]
    return -0.5 + 1.0 / np.maximum(denom, E_DENOMINATOR_FLOOR)


_LOAN = {
    # node: (parents, fn, noise, additive)
    "G": ((), lambda v, u: u["G"], Noise("bernoulli", {"p": 0.5}), True),
    "A": ((), lambda v, u: -35.0 + u["A"], Noise("gamma", {"shape": 10.0, "scale": 3.5}), True),
    "E": (("G", "A"), _loan_e, Noise("normal", {"mean": 0.0, "std": 0.5}), False),
    "L": (("G", "A"), lambda v, u: 1.0 + 0.01 * (v["A"] - 5.0) * (5.0 - v["A"]) + v["G"] + u["L"],
          Noise("normal", {"mean": 0.0, "std": 2.0}), True),
    "D": (("G", "A", "L"), lambda v, u: -1.0 + 0.1 * v["A"] + 2.0 * v["G"] + v["L"] + u["D"],
          Noise("normal", {"mean": 0.0, "std": 3.0}), True),
    "I": (("G", "A", "E"), lambda v, u: -4.0 + 0.1 * (v["A"] + 35.0) + 2.0 * v["G"] + v["G"] * v["E"] + u["I"],
          Noise("normal", {"mean": 0.0, "std": 2.0}), True),
    "S": (("I",), lambda v, u: -4.0 + 1.5 * (v["I"] > 0) * v["I"] + u["S"],
          Noise("normal", {"mean": 0.0, "std": 5.0}), True),
}


def _loan_mechanism(node, e_form="exponent"):
    parents, fn, noise, additive = _LOAN[node]
    name = f"loan.{node}"
    if node == "E" and e_form == "outer":
        fn, name = _loan_e_outer, "loan.E_outer"
    elif node == "E" and e_form != "exponent":
        raise ValueError(f"unknown Loan E form {e_form!r}")
    return Mechanism(node, parents, fn, noise, additive, (node,), {"type": "builtin", "name": name})


def loan_scm(e_form: str = "exponent") -> Scm:
    """Loan SCM. ``e_form="outer"`` evaluates education with U_E outside
    the exponential (denominator floored at 1e-3) instead of inside it."""
    edges = [(p, n) for n in LOAN_NODES for p in _LOAN[n][0]]
    return Scm(CausalGraph(LOAN_NODES, edges), {n: _loan_mechanism(n, e_form) for n in LOAN_NODES}, "loan")


def loan_label(x) -> np.ndarray:
    """Approval probability Y = sigmoid(0.3 (-L - D + I + S + I*S))."""
    x = np.asarray(x, dtype=np.float64)
    L, D, I, S = (x[..., LOAN_NODES.index(k)] for k in ("L", "D", "I", "S"))
    return sigmoid(0.3 * (-L - D + I + S + I * S))


# ---------------------------------------------------------------------- Adult

ADULT_NODES = ["R", "A", "N", "S", "E", "H", "W", "M", "O", "L"]
ADULT_ACTIONABLE = ["A", "E", "H"]


def _adult_e(v, u):
    R, A, S, N = v["R"], v["A"], v["S"], v["N"]
    base = np.exp(2 * _ind(R == 0) + _ind(R == 1) + sigmoid(A - 30))
    sex = 0.5 * _ind(S == 0) + _ind(S == 1)
    country = 2 * _ind(N == 1) + 5 * _ind(N == 2) + _ind(N == 3)
    return base + sex * country + u["E"]


def _adult_h(v, u):
    R, A, N, E, S = v["R"], v["A"], v["N"], v["E"], v["S"]
    hours = 40 * _ind(N == 0) + 36 * _ind(N == 1) + 50 * _ind(N == 2) + 30 * _ind(N == 3)
    race = 0.5 * _ind(R == 0) + _ind(R == 1) + 1.3 * _ind(R == 2)
    inner = hours * race + 2 * np.exp(-(A - 30) ** 2) + 5 * np.abs(np.tanh(E - 2)) + 2 * _ind(S == 0) + u["H"]
    return inner * _ind(A < 70)


def _adult_w(v, u):
    E, H, A, N = v["E"], v["H"], v["A"], v["N"]
    s = sigmoid(H - 30 + u["W"])
    w1 = (_ind(5 * np.abs(np.tanh(E - 2)) + s > 0.3) + _ind(s > 0.3) * _ind(A + 1.5 * u["W"] > 50)
          - _ind(N == 0) + _ind(N == 1) + 3 * _ind(N == 3))
    w2 = w1 * _ind(w1 <= 3) + 3 * _ind(w1 > 3)
    return w2 * _ind(w2 >= 0)


def row_mode(cols) -> np.ndarray:
    """Most frequent value per row; ties go to the smallest value."""
    m = np.stack([np.broadcast_to(np.asarray(c, dtype=np.float64), np.shape(cols[0])) for c in cols], axis=-1)
    counts = (m[..., :, None] == m[..., None, :]).sum(axis=-1)
    best = counts.max(axis=-1, keepdims=True)
    cand = np.where(counts == best, m, np.inf)
    return cand.min(axis=-1)


def sex_code(S, um):
    """g2: int(S + 0.5 U_M) clipped into {0, 1}."""
    g1 = np.trunc(S + 0.5 * um)
    return 0 * _ind(g1 < 0) + _ind(g1 > 1) + g1 * _ind((g1 >= 0) & (g1 <= 1))


def _adult_m(v, u):
    R, A, W, H, S = v["R"], v["A"], v["W"], v["H"], v["S"]
    um = u["M"]
    r1 = np.trunc(R + 0.2 * um) * _ind((R >= 0) & (R <= 2)) + 2 * _ind(R == 2)
    r2 = 2 * _ind(r1 == 1) + _ind(r1 == 2)
    g2 = sex_code(S, um)
    g3 = _ind(g2 == 0) + 2 * _ind(g2 == 1)
    a1 = 0 * _ind(A > 0)
    h1 = 3 * np.trunc(sigmoid(H - 30))
    h2 = h1 * _ind(h1 <= 2) + 2 * _ind(h1 > 2)
    return row_mode([r2, a1, W, h2, H, g3])


def _adult_l(v, u):
    M, N, A, S, E = v["M"], v["N"], v["A"], v["S"], v["E"]
    uo = u["O"]
    cn = uo * _ind(N == 0) - uo * _ind(N == 1) + 2 * uo * _ind(N == 2) + 2 * _ind(N == 3)
    ce = sigmoid(E - 30)
    c = cn + ce + 2 * _ind(A < 20) - 2 * _ind(S == 0)
    m1 = M == 1
    return (0 * _ind(m1 & (c < -1)) + 1 * _ind(m1 & (c >= -1))
            + 2 * _ind(~m1 & (c >= -1)) + 1 * _ind(~m1 & (c < -1)))


def _adult_o(v, u):
    R, A, E, W, M, S = v["R"], v["A"], v["E"], v["W"], v["M"], v["S"]
    uo = u["O"]
    k = R + 2 * np.exp(-(A + uo - 20) ** 2) - sigmoid(E * uo - 30) + W + 3 * M + 4 * S
    return 0 * _ind(k <= 1) + 1 * _ind((k >= 1) & (k <= 4)) + 2 * _ind(k >= 4)


_ADULT = {
    "R": ((), lambda v, u: u["R"], Noise("categorical", {"probs": [0.85, 0.1, 0.05]}), True, ("R",)),
    "A": ((), lambda v, u: u["A"] + 17.0, Noise("gamma", {"shape": 3.0, "scale": 10.0}), True, ("A",)),
    "N": ((), lambda v, u: u["N"], Noise("categorical", {"probs": [0.3, 0.5, 0.1, 0.1]}), True, ("N",)),
    "S": ((), lambda v, u: u["S"], Noise("bernoulli", {"p": 0.67}), True, ("S",)),
    "E": (("R", "A", "S", "N"), _adult_e, Noise("gamma", {"shape": 1.0, "scale": 1.0}), True, ("E",)),
    "H": (("R", "A", "N", "E", "S"), _adult_h, Noise("normal", {"mean": 0.0, "std": 1.0}), False, ("H",)),
    "W": (("E", "H", "A", "N"), _adult_w, Noise("normal", {"mean": 0.0, "std": 1.0}), False, ("W",)),
    "M": (("R", "A", "W", "H", "S"), _adult_m, Noise("normal", {"mean": 0.0, "std": 1.0}), False, ("M",)),
    "O": (("R", "A", "E", "W", "M", "S"), _adult_o,
          Noise("mixture_normal", {"weights": [0.5, 0.5], "means": [-2.5, 2.5], "stds": [1.0, 1.0]}), False, ("O",)),
    # f_L reads U_O; U_L is drawn and stored but unused
    "L": (("M", "N", "A", "S", "E"), _adult_l, Noise("normal", {"mean": 0.0, "std": 1.0}), False, ("O",)),
}


def _adult_mechanism(node):
    parents, fn, noise, additive, noise_in = _ADULT[node]
    return Mechanism(node, parents, fn, noise, additive, noise_in, {"type": "builtin", "name": f"adult.{node}"})


def adult_scm() -> Scm:
    edges = [(p, n) for n in ADULT_NODES for p in _ADULT[n][0]]
    return Scm(CausalGraph(ADULT_NODES, edges), {n: _adult_mechanism(n) for n in ADULT_NODES}, "adult")


def adult_income(x) -> np.ndarray:
    """Indicator-sum income in dollars (R=1 earns the 10,000 term)."""
    x = np.asarray(x, dtype=np.float64)
    R, A, N, S, E, H, W, M, O, L = (x[..., i] for i in range(10))
    return (20000 * _ind(R > 1.5) + 10000 * _ind(R < 1.5) + 2816 * _ind(A >= 30) + 9488 * _ind(E >= 10)
            + 5000 * _ind(O == 1) + 15000 * _ind(O == 2) + 5000 * _ind(W == 0) + 7000 * _ind(W == 1)
            + 1000 * _ind(M == 0) + 4000 * _ind(M == 1) - 2000 * _ind(M == 2) + 15000 * _ind(H > 45)
            + 10000 * _ind(N >= 2) + 4000 * _ind(S == 1) + 3000 * _ind(L <= 1))


for _n in LOAN_NODES:
    BUILTIN_MECHANISMS[f"loan.{_n}"] = (lambda n: lambda: _loan_mechanism(n))(_n)
BUILTIN_MECHANISMS["loan.E_outer"] = lambda: _loan_mechanism("E", "outer")
for _n in ADULT_NODES:
    BUILTIN_MECHANISMS[f"adult.{_n}"] = (lambda n: lambda: _adult_mechanism(n))(_n)


# ----------------------------------------------------------------- label rules

@dataclass(frozen=True)
class LabelRule:
    name: str
    raw: callable
    lo: float
    hi: float
    anomaly_high: bool

    def label_value(self, x):
        return self.raw(x)

    def is_normal(self, x):
        v = self.raw(x)
        return v <= self.hi if self.anomaly_high else v > self.hi

    def is_anomaly(self, x):
        v = self.raw(x)
        return v > self.hi if self.anomaly_high else v < self.lo


# Loan: normal Y > 0.9, anomaly Y < 0.1, the band in between is discarded.
LOAN_RULE = LabelRule("Y", loan_label, 0.1, 0.9, anomaly_high=False)
# Adult: normal I <= 50k, anomaly I > 50k.
ADULT_RULE = LabelRule("I", adult_income, 50000.0, 50000.0, anomaly_high=True)


# -------------------------------------------------------------- dataset bundle

@dataclass
class DatasetBundle:
    name: str
    nodes: list[str]
    X_train: np.ndarray
    U_train: np.ndarray
    X_unlabeled: np.ndarray
    U_unlabeled: np.ndarray
    y_unlabeled: np.ndarray  # 1 anomalous, 0 normal
    raw_train: np.ndarray = field(default=None)
    raw_unlabeled: np.ndarray = field(default=None)

    @property
    def mean(self):
        return self.X_train.mean(axis=0)

    @property
    def std(self):
        return self.X_train.std(axis=0)

    @property
    def cost(self):
        """Per-feature cost basis: std of normal-training rows, floored to stay positive."""
        return np.maximum(self.std, 1e-6)

    def counts(self):
        return len(self.X_train), int((self.y_unlabeled == 0).sum()), int((self.y_unlabeled == 1).sum())


class GenerationError(RuntimeError):
    pass


def generate_bundle(scm: Scm, rule: LabelRule, n_normal_train: int, n_normal_unlabeled: int, n_anomalous: int,
                    seed: int, chunk: int = 50_000, window: int = 1_000_000) -> DatasetBundle:
    """Rejection-sample normals and anomalies from ``scm``.

    Raw draw ``r`` always uses row stream ``r`` of ``seed``, so the result
    does not depend on the chunk size.
    """
    for c in (n_normal_train, n_normal_unlabeled, n_anomalous):
        if c < 1:
            raise ValueError("all counts must be >= 1")
    need_norm = n_normal_train + n_normal_unlabeled
    normals_x, normals_u, anom_x, anom_u = [], [], [], []
    got_n = got_a = drawn = 0
    while got_n < need_norm or got_a < n_anomalous:
        rows = np.arange(drawn, drawn + chunk)
        U = draw_noise(scm.noises, seed, rows)
        with np.errstate(all="ignore"):
            X = scm.simulate(U)
        ok = np.all(np.isfinite(X), axis=1)
        is_n = ok & rule.is_normal(X)
        is_a = ok & rule.is_anomaly(X)
        if got_n < need_norm:
            normals_x.append(X[is_n]), normals_u.append(U[is_n])
            got_n += int(is_n.sum())
        if got_a < n_anomalous:
            anom_x.append(X[is_a]), anom_u.append(U[is_a])
            got_a += int(is_a.sum())
        drawn += chunk
        if drawn >= window:
            for label, got, need in (("normal", got_n, need_norm), ("anomalous", got_a, n_anomalous)):
                if got < need and got / drawn < 1e-3:
                    raise GenerationError(
                        f"{scm.name}: {label} acceptance rate {got / drawn:.2e} below 0.1% after {drawn} draws "
                        f"({got} of {need} accepted)")
    Xn, Un = np.concatenate(normals_x)[:need_norm], np.concatenate(normals_u)[:need_norm]
    Xa, Ua = np.concatenate(anom_x)[:n_anomalous], np.concatenate(anom_u)[:n_anomalous]
    Xu = np.concatenate([Xn[n_normal_train:], Xa])
    Uu = np.concatenate([Un[n_normal_train:], Ua])
    y = np.concatenate([np.zeros(n_normal_unlabeled, dtype=int), np.ones(n_anomalous, dtype=int)])
    perm = np.random.default_rng(sub_seed(seed, "unlabeled-shuffle")).permutation(len(y))
    Xu, Uu, y = Xu[perm], Uu[perm], y[perm]
    Xt, Ut = Xn[:n_normal_train], Un[:n_normal_train]
    return DatasetBundle(scm.name, list(scm.nodes), Xt, Ut, Xu, Uu, y, rule.raw(Xt), rule.raw(Xu))


def gen_loan(n_normal_train=10_000, n_normal_unlabeled=10_000, n_anomalous=1_000, seed=0) -> DatasetBundle:
    return generate_bundle(loan_scm(), LOAN_RULE, n_normal_train, n_normal_unlabeled, n_anomalous, seed)


def gen_adult(n_normal_train=10_000, n_normal_unlabeled=10_000, n_anomalous=1_000, seed=0) -> DatasetBundle:
    return generate_bundle(adult_scm(), ADULT_RULE, n_normal_train, n_normal_unlabeled, n_anomalous, seed)


def builtin(name: str):
    """(scm, label rule, default actionable set) for a built-in dataset."""
    if name == "loan":
        return loan_scm(), LOAN_RULE, list(LOAN_ACTIONABLE)
    if name == "adult":
        return adult_scm(), ADULT_RULE, list(ADULT_ACTIONABLE)
    raise ValueError(f"unknown dataset {name!r}")


# ------------------------------------------------------------------ CSV files

class SchemaError(ValueError):
    pass


SPLITS = ("train", "unlabeled")


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path, header):
    if not path.exists():
        raise FileNotFoundError(f"missing file {path.name} (expected at {path})")
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        got = next(r, None)
        if got != list(header):
            raise SchemaError(f"{path.name}:1: header {got} does not match expected {list(header)}")
        rows = []
        for lineno, row in enumerate(r, start=2):
            if len(row) != len(header):
                raise SchemaError(f"{path.name}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise SchemaError(f"{path.name}:{lineno}: {exc}") from None
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))


def write_bundle(bundle: DatasetBundle, path) -> list[Path]:
    """Write ``<split>_features.csv``, ``<split>_noise.csv`` and
    ``<split>_labels.csv`` for both splits. Floats use shortest round-trip
    repr so reading back is bit-exact."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    raw_name = "Y" if bundle.name == "loan" else ("I" if bundle.name == "adult" else "raw_label")
    written = []
    for split in SPLITS:
        X = getattr(bundle, f"X_{split}")
        U = getattr(bundle, f"U_{split}")
        raw = getattr(bundle, f"raw_{split}")
        y = np.zeros(len(X), dtype=int) if split == "train" else bundle.y_unlabeled
        raw = np.full(len(X), np.nan) if raw is None else raw
        f = out / f"{split}_features.csv"
        _write_csv(f, bundle.nodes, ([_fmt(v) for v in row] for row in X))
        n = out / f"{split}_noise.csv"
        _write_csv(n, ["row_index"] + [f"u_{k}" for k in bundle.nodes],
                   ([str(i)] + [_fmt(v) for v in row] for i, row in enumerate(U)))
        lab = out / f"{split}_labels.csv"
        _write_csv(lab, ["row_index", "ground_truth_label", raw_name],
                   ([str(i), str(int(y[i])), _fmt(raw[i])] for i in range(len(X))))
        written += [f, n, lab]
    (out / "dataset.txt").write_text(f"{bundle.name}\n{','.join(bundle.nodes)}\n")
    return written


def read_bundle(path) -> DatasetBundle:
    src = Path(path)
    meta = src / "dataset.txt"
    if not meta.exists():
        raise FileNotFoundError(f"missing file dataset.txt (expected at {meta})")
    name, nodes_line = meta.read_text().splitlines()[:2]
    nodes = nodes_line.split(",")
    raw_name = "Y" if name == "loan" else ("I" if name == "adult" else "raw_label")
    parts = {}
    for split in SPLITS:
        X = _read_csv(src / f"{split}_features.csv", nodes)
        U = _read_csv(src / f"{split}_noise.csv", ["row_index"] + [f"u_{k}" for k in nodes])
        L = _read_csv(src / f"{split}_labels.csv", ["row_index", "ground_truth_label", raw_name])
        for fname, arr in ((f"{split}_noise.csv", U), (f"{split}_labels.csv", L)):
            if len(arr) != len(X):
                raise SchemaError(f"{fname}: {len(arr)} rows but {split}_features.csv has {len(X)}")
            if not np.array_equal(arr[:, 0], np.arange(len(X))):
                bad = int(np.flatnonzero(arr[:, 0] != np.arange(len(X)))[0])
                raise SchemaError(f"{fname}:{bad + 2}: row_index out of sequence")
        parts[split] = (X, U[:, 1:], L[:, 1].astype(int), L[:, 2])
    (Xt, Ut, _, rt), (Xu, Uu, yu, ru) = parts["train"], parts["unlabeled"]
    return DatasetBundle(name, nodes, Xt, Ut, Xu, Uu, yu, rt, ru)
