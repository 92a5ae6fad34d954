"""Score-based anomaly detectors (autoencoder reconstruction, Deep SVDD),
nearest-rank threshold calibration and detection metrics."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .nets import MLP, Adam, batches, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class DetectorConfig:
    kind: str = "ae"  # "ae" | "svdd"
    epochs: int = 60
    batch_size: int = 128
    lr: float = 2e-3
    seed: int = 0
    ae_sizes: tuple[int, ...] = (16, 4, 16)
    svdd_sizes: tuple[int, ...] = (32, 8)
    svdd_out: str = "linear"
    # epochs of bias-free autoencoder pretraining that initialise r(.)
    svdd_pretrain_epochs: int = 0
    weight_decay: float = 0.0
    # cosine decay of the learning rate down to lr * lr_floor over training
    lr_floor: float = 1.0
    # False scales features by the normal-data std without subtracting the
    # mean; keeps Deep SVDD's initial centre away from the origin
    center_inputs: bool = True

    def __post_init__(self):
        if self.kind not in ("ae", "svdd"):
            raise ValueError(f"detector kind must be 'ae' or 'svdd', got {self.kind!r}")
        self.ae_sizes = tuple(self.ae_sizes)
        self.svdd_sizes = tuple(self.svdd_sizes)


class UntrainedDetectorError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


class _Detector:
    kind = ""

    def __init__(self, config: DetectorConfig, mean, std):
        self.config = config
        self.mean = np.asarray(mean, dtype=float)
        self.std = np.asarray(std, dtype=float)
        self.trained = False

    @property
    def d(self):
        return len(self.mean)

    def score_tensor(self, tape: dc.Tape, x: dc.Tensor) -> dc.Tensor:
        """Per-row anomaly score g(x) for raw-unit rows ``x`` of shape (n, d)."""
        if not self.trained:
            raise UntrainedDetectorError(f"{self.kind} detector has not been trained")
        offset = np.broadcast_to(-self.mean / self.std, x.shape)
        xs = dc.add(dc.scale(x, 1.0 / self.std), tape.constant(offset))
        return self._score_std(tape, xs)

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tape = dc.Tape()
        return self.score_tensor(tape, tape.constant(x)).value

    def _score_std(self, tape, xs):
        raise NotImplementedError

    def _tensors(self) -> dict:
        raise NotImplementedError

    def save(self, path):
        cfg = asdict(self.config)
        save_checkpoint(path, "detector", cfg, {**self._tensors(), "mean": self.mean, "std": self.std},
                        {"trained": self.trained, "kind": self.kind})


class AeDetector(_Detector):
    """g(x) = ||x - decoder(encoder(x))||_2 in standardised units."""

    kind = "ae"

    def __init__(self, config: DetectorConfig, mean, std):
        super().__init__(config, mean, std)
        rng = np.random.default_rng(config.seed)
        sizes = [self.d, *config.ae_sizes, self.d]
        self.net = MLP(sizes, rng, activation="tanh", out_activation="linear", name="ae")

    @property
    def params(self):
        return self.net.params

    def reconstruct_std(self, tape, xs):
        return self.net(tape, xs)

    def _score_std(self, tape, xs):
        return dc.l2norm(dc.sub(xs, self.net(tape, xs)), axis=1)

    def _tensors(self):
        return {p.name: p.value for p in self.net.params}


class SvddDetector(_Detector):
    """g(x) = ||r(x) - mu||_2 with a bias-free tanh representation r and a
    center mu fixed after initialisation."""

    kind = "svdd"

    def __init__(self, config: DetectorConfig, mean, std, seed_offset: int = 0):
        super().__init__(config, mean, std)
        rng = np.random.default_rng(config.seed + seed_offset)
        self.net = MLP([self.d, *config.svdd_sizes], rng, activation="tanh", out_activation=config.svdd_out,
                       bias=False, name="svdd")
        self.center = np.zeros(config.svdd_sizes[-1])

    @property
    def params(self):
        return self.net.params

    def embed_std(self, xs: np.ndarray) -> np.ndarray:
        return self.net.predict(xs)

    def _score_std(self, tape, xs):
        center = np.broadcast_to(self.center, (xs.shape[0], len(self.center)))
        return dc.l2norm(dc.sub(self.net(tape, xs), tape.constant(center)), axis=1)

    def _tensors(self):
        return {**{p.name: p.value for p in self.net.params}, "center": self.center}


Detector = AeDetector | SvddDetector


def load_detector(path) -> Detector:
    doc, tensors = load_checkpoint(path, "detector")
    cfg = DetectorConfig(**doc["config"])
    mean, std = tensors.pop("mean"), tensors.pop("std")
    det = AeDetector(cfg, mean, std) if cfg.kind == "ae" else SvddDetector(cfg, mean, std)
    if cfg.kind == "svdd":
        det.center = tensors.pop("center")
    for p in det.params:
        p.value = tensors[p.name]
    det.trained = bool(doc["extra"].get("trained"))
    return det


def _standardization(X, mean, std, center: bool = True):
    mean = X.mean(axis=0) if mean is None else np.asarray(mean, dtype=float)
    std = X.std(axis=0) if std is None else np.asarray(std, dtype=float)
    if not center:
        mean = np.zeros_like(mean)
    return mean, np.where(std > 1e-12, std, 1.0)


_DEFAULTS = {
    "ae": dict(epochs=600, lr=5e-3, batch_size=64, ae_sizes=(64, 32, 4, 32, 64)),
    "svdd": dict(epochs=50, lr=1e-3, batch_size=64, svdd_sizes=(32, 8), center_inputs=False),
}


def default_config(kind: str = "ae", **overrides) -> DetectorConfig:
    """Tuned training defaults for each detector kind; keyword overrides win."""
    if kind not in _DEFAULTS:
        raise ValueError(f"detector kind must be 'ae' or 'svdd', got {kind!r}")
    return DetectorConfig(kind=kind, **{**_DEFAULTS[kind], **overrides})


def _fit(det: _Detector, xs_all: np.ndarray, loss_fn, rng):
    cfg = det.config
    opt = Adam(det.params, lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * (cfg.lr_floor + (1 - cfg.lr_floor) * 0.5 * (1 + np.cos(np.pi * epoch / cfg.epochs)))
        tot, nb = 0.0, 0
        for b, idx in enumerate(batches(len(xs_all), cfg.batch_size, rng)):
            tape = dc.Tape()
            loss = loss_fn(tape, tape.constant(xs_all[idx]))
            if not np.isfinite(loss.value):
                raise DivergenceError(f"{det.kind} loss became non-finite at epoch {epoch}, batch {b}")
            opt.zero_grad()
            tape.backward(loss)
            if cfg.weight_decay:
                for p in det.params:
                    p.grad = p.grad + cfg.weight_decay * p.value
            opt.step()
            tot += float(loss.value)
            nb += 1
        history.append(tot / nb)
        log.info("%s epoch %d loss %.5f", det.kind, epoch, tot / nb)
    return history


def _check_rows(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 100:
        raise ValueError(f"detector training needs at least 100 rows, got {len(X)}")
    return X


def train_ae(X_normal, config: DetectorConfig | None = None, mean=None, std=None) -> AeDetector:
    """Minimise mean squared reconstruction error over normal rows."""
    config = config or DetectorConfig(kind="ae")
    X = _check_rows(X_normal)
    mean, std = _standardization(X, mean, std, config.center_inputs)
    det = AeDetector(config, mean, std)
    xs = (X - mean) / std

    def loss_fn(tape, x):
        r = dc.sub(x, det.net(tape, x))
        return dc.scale(dc.sum(dc.square(r)), 1.0 / r.value.size)

    det.history = _fit(det, xs, loss_fn, np.random.default_rng(config.seed + 1))
    det.trained = True
    return det


CENTER_MIN_NORM = 0.01
CENTER_ATTEMPTS = 5


def _pretrain_encoder(det: SvddDetector, xs, config: DetectorConfig, attempt: int):
    """Fit r(.) as the encoder of a bias-free autoencoder with a mirrored decoder."""
    rng = np.random.default_rng(config.seed + 7 + 1000 * attempt)
    sizes = [*config.svdd_sizes[::-1], det.d]
    dec = MLP(sizes, rng, activation="tanh", out_activation="linear", bias=False, name="svdd_pre")
    params = det.params + dec.params
    opt = Adam(params, lr=config.lr)
    for _ in range(config.svdd_pretrain_epochs):
        for idx in batches(len(xs), config.batch_size, rng):
            tape = dc.Tape()
            x = tape.constant(xs[idx])
            r = dc.sub(x, dec(tape, det.net(tape, x)))
            loss = dc.scale(dc.sum(dc.square(r)), 1.0 / r.value.size)
            opt.zero_grad()
            tape.backward(loss)
            opt.step()


def train_svdd(X_normal, config: DetectorConfig | None = None, mean=None, std=None) -> SvddDetector:
    """Fix mu as the mean initial embedding of the normals, then minimise the
    mean squared distance to mu."""
    config = config or DetectorConfig(kind="svdd")
    X = _check_rows(X_normal)
    mean, std = _standardization(X, mean, std, config.center_inputs)
    xs = (X - mean) / std
    for attempt in range(CENTER_ATTEMPTS):
        det = SvddDetector(config, mean, std, seed_offset=1000 * attempt)
        if config.svdd_pretrain_epochs:
            _pretrain_encoder(det, xs, config, attempt)
        center = det.embed_std(xs).mean(axis=0)
        if np.linalg.norm(center) > CENTER_MIN_NORM:
            break
        log.warning("svdd center collapsed at init (|mu|=%.3g); re-initialising", np.linalg.norm(center))
    else:
        raise DivergenceError(f"svdd center norm stayed <= {CENTER_MIN_NORM} over {CENTER_ATTEMPTS} initialisations")
    det.center = center.copy()

    def loss_fn(tape, x):
        diff = dc.sub(det.net(tape, x), tape.constant(np.broadcast_to(det.center, (x.shape[0], len(det.center)))))
        return dc.scale(dc.sum(dc.square(diff)), 1.0 / x.shape[0])

    det.history = _fit(det, xs, loss_fn, np.random.default_rng(config.seed + 1))
    det.trained = True
    return det


def train_detector(X_normal, config: DetectorConfig, mean=None, std=None) -> Detector:
    fn = train_ae if config.kind == "ae" else train_svdd
    return fn(X_normal, config, mean, std)


# ------------------------------------------------------------------ threshold

@dataclass(frozen=True)
class DetectorThreshold:
    tau: float
    level: float


def nearest_rank(scores, level: float) -> float:
    """k-th smallest score with k = ceil(level * n)."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("cannot calibrate a threshold on an empty score set")
    if not 0.0 < level <= 1.0:
        raise ValueError(f"quantile level must lie in (0, 1], got {level}")
    # guard against level * n landing a hair above an integer
    k = int(np.ceil(np.round(level * s.size, 9)))
    return float(s[max(k, 1) - 1])


def calibrate_threshold(detector: Detector, X_normal_train, level: float = 0.995) -> DetectorThreshold:
    X = np.atleast_2d(np.asarray(X_normal_train, dtype=float))
    if X.size == 0 or len(X) == 0:
        raise ValueError("cannot calibrate a threshold on an empty training set")
    return DetectorThreshold(nearest_rank(detector.score(X), level), level)


def detect(scores, tau: float) -> np.ndarray:
    """Boolean anomaly labels: g(x) > tau."""
    return np.asarray(scores, dtype=float) > tau


# -------------------------------------------------------------------- metrics

def _check_labels(labels):
    y = np.asarray(labels).astype(bool).ravel()
    if y.all() or not y.any():
        raise ValueError("detection metrics need both classes present")
    return y


def auroc(scores, labels) -> float:
    """Fraction of (anomaly, normal) pairs ranked correctly; ties count one half.

    Computed from average ranks, which equals the pair count exactly."""
    y = _check_labels(labels)
    s = np.asarray(scores, dtype=float).ravel()
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    # average ranks over tied groups
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    n_pos, n_neg = y.sum(), (~y).sum()
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_trapezoid(scores, labels) -> float:
    """Area under the ROC curve by the trapezoid rule over distinct thresholds."""
    y = _check_labels(labels)
    s = np.asarray(scores, dtype=float).ravel()
    thresholds = np.unique(s)[::-1]
    tpr = [0.0] + [np.mean(s[y] >= t) for t in thresholds]
    fpr = [0.0] + [np.mean(s[~y] >= t) for t in thresholds]
    return float(np.trapezoid(tpr, fpr) if hasattr(np, "trapezoid") else np.trapz(tpr, fpr))


def auprc(scores, labels) -> float:
    """Step-wise precision-recall integral: sum of (R_k - R_{k-1}) P_k over
    distinct score thresholds, highest first."""
    y = _check_labels(labels)
    s = np.asarray(scores, dtype=float).ravel()
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s) - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_at(scores, labels, tau: float) -> float:
    y = _check_labels(labels)
    pred = detect(scores, tau).ravel()
    tp = np.sum(pred & y)
    fp = np.sum(pred & ~y)
    fn = np.sum(~pred & y)
    return float(2 * tp / (2 * tp + fp + fn)) if tp else 0.0


def detection_metrics(scores, labels, tau: float) -> dict:
    scores = np.asarray(scores, dtype=float)
    return {
        "f1": f1_at(scores, labels, tau),
        "auroc": auroc(scores, labels),
        "auprc": auprc(scores, labels),
        "tau": float(tau),
        "n_detected": int(detect(scores, tau).sum()),
    }
