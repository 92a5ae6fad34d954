"""Command-line entry point.

Every command reads and writes artifacts inside ``--out``::

    data/                      generated splits (features, noise, labels)
    detector_<kind>.json       detector checkpoint with its threshold
    engine.json                learned counterfactual engine
    policy_<kind>_<base>.json  action policy
    config_<command>.json      resolved configuration of the last run

Exit codes: 0 success, 2 IO, 3 validation, 4 missing dependency, 5 bad argument.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import detectors as det_mod
from . import evaluation as ev
from .engine import EngineConfig, ExactEngine, GraphVAE, train_engine
from .recourse import ActionPolicy, RecourseConfig, topological
from .scm import CycleError, Scm, load_scm
from .streams import sub_seed

log = logging.getLogger("causal_recourse")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_MISSING, EXIT_ARGUMENT = 0, 2, 3, 4, 5
COMMANDS = ["generate", "train-detector", "train-engine", "train-recourse", "evaluate", "sweep", "explain"]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    dataset: str = "loan"
    scm: str | None = None
    detector: str = "svdd"
    engine: str = "learned"
    baseline: str = "adcar"
    actionable: list[str] | None = None
    lam: float = 1e-3
    alpha: float | None = None
    tau_level: float = 0.995
    seed: int = 0
    out: str = "runs/default"
    n_train: int = 10_000
    n_unlabeled: int = 10_000
    n_anomalous: int = 1_000
    detector_epochs: int | None = None
    engine_epochs: int | None = None
    policy_epochs: int | None = None
    policy_lr: float | None = None
    index: int = 0
    param: str = "lambda"
    values: list[float] | None = None
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.dataset not in ("loan", "adult", "custom"):
            raise CliError(EXIT_ARGUMENT, f"--dataset must be loan, adult or custom, got {self.dataset!r}")
        if self.dataset == "custom" and not self.scm:
            raise CliError(EXIT_ARGUMENT, "--dataset custom needs --scm <file>")
        if self.scm and not Path(self.scm).exists():
            raise CliError(EXIT_VALIDATION, f"SCM file {self.scm} does not exist")
        for name, allowed in (("detector", ("ae", "svdd")), ("engine", ("learned", "exact")),
                              ("baseline", ("adcar", "naive")), ("param", ("lambda", "alpha"))):
            if getattr(self, name) not in allowed:
                raise CliError(EXIT_ARGUMENT, f"--{name} must be one of {', '.join(allowed)}")
        if not 0.0 < self.tau_level <= 1.0:
            raise CliError(EXIT_ARGUMENT, f"--tau-level must lie in (0, 1], got {self.tau_level}")
        if self.lam < 0:
            raise CliError(EXIT_ARGUMENT, "--lambda must be >= 0")
        if self.alpha is not None and not 0.0 < self.alpha <= 1.0:
            raise CliError(EXIT_ARGUMENT, f"--alpha must lie in (0, 1], got {self.alpha}")
        for k in ("n_train", "n_unlabeled", "n_anomalous"):
            if getattr(self, k) < 1:
                raise CliError(EXIT_ARGUMENT, f"{k} must be >= 1")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def alpha_value(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 0.3 if self.dataset == "adult" else 0.5


# ---------------------------------------------------------------- problem

@dataclass
class Problem:
    scm: Scm
    rule: ds.LabelRule
    actionable: list[str]


def _label_rule_from_doc(doc: dict) -> ds.LabelRule:
    spec = doc.get("label")
    if not spec:
        raise CliError(EXIT_VALIDATION, "custom SCM needs a 'label' entry {node, threshold, anomaly_high}")
    node, t, high = spec["node"], float(spec["threshold"]), bool(spec.get("anomaly_high", True))
    idx = doc["nodes"].index(node)
    return ds.LabelRule(node, lambda x, i=idx: np.asarray(x)[..., i], t, t, high)


def load_problem(cfg: RunConfig) -> Problem:
    if cfg.dataset == "custom":
        try:
            doc = json.loads(Path(cfg.scm).read_text())
            scm = load_scm(cfg.scm)
        except CycleError as exc:
            raise CliError(EXIT_VALIDATION, f"invalid SCM {cfg.scm}: {exc}") from None
        except (KeyError, ValueError, TypeError) as exc:
            raise CliError(EXIT_VALIDATION, f"invalid SCM {cfg.scm}: {exc}") from None
        rule = _label_rule_from_doc(doc)
        default_act = [n for n in scm.nodes if scm.graph.parents(n)] or list(scm.nodes)
    else:
        scm, rule, default_act = ds.builtin(cfg.dataset)
    act = list(cfg.actionable) if cfg.actionable else default_act
    unknown = set(act) - set(scm.nodes)
    if unknown:
        raise CliError(EXIT_VALIDATION, f"actionable nodes {sorted(unknown)} are not features of {scm.name}")
    return Problem(scm, rule, act)


# --------------------------------------------------------------- artifacts

def data_dir(cfg):
    return cfg.out_dir / "data"


def detector_path(cfg):
    return cfg.out_dir / f"detector_{cfg.detector}.json"


def engine_path(cfg):
    return cfg.out_dir / "engine.json"


def policy_path(cfg, baseline=None):
    return cfg.out_dir / f"policy_{cfg.detector}_{baseline or cfg.baseline}.json"


def _require(path: Path, what: str):
    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing {what}: {path} (run the command that produces it first)")


def load_data(cfg) -> ds.DatasetBundle:
    d = data_dir(cfg)
    _require(d / "dataset.txt", "dataset")
    try:
        return ds.read_bundle(d)
    except ds.SchemaError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None


def load_detector(cfg):
    _require(detector_path(cfg), f"{cfg.detector} detector checkpoint")
    detector = det_mod.load_detector(detector_path(cfg))
    doc = json.loads(detector_path(cfg).read_text())
    return detector, float(doc["extra"]["tau"])


def load_engine(cfg, problem: Problem, bundle):
    if cfg.engine == "exact":
        return ExactEngine(problem.scm, bundle.mean, bundle.std)
    _require(engine_path(cfg), "engine checkpoint")
    try:
        return GraphVAE.load(engine_path(cfg), problem.scm.graph)
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None


def recourse_config(cfg: RunConfig, baseline=None) -> RecourseConfig:
    kw = {"lam": cfg.lam, "alpha": cfg.alpha_value, "seed": sub_seed(cfg.seed, "policy") % 2**31,
          "engine": cfg.engine, "baseline": baseline or cfg.baseline}
    if cfg.policy_epochs is not None:
        kw["epochs"] = cfg.policy_epochs
    if cfg.policy_lr is not None:
        kw["lr"] = cfg.policy_lr
    return RecourseConfig(**kw)


def make_setup(cfg, problem, bundle, detector, tau, engine) -> ev.RecourseSetup:
    try:
        return ev.detected_setup(bundle, problem.scm, problem.rule, problem.actionable, detector, tau, engine)
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: RunConfig):
    problem = load_problem(cfg)
    try:
        bundle = ds.generate_bundle(problem.scm, problem.rule, cfg.n_train, cfg.n_unlabeled, cfg.n_anomalous,
                                    sub_seed(cfg.seed, "data"))
    except ds.GenerationError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    if cfg.dataset == "custom":
        bundle.name = "custom"
    files = ds.write_bundle(bundle, data_dir(cfg))
    n_tr, n_norm, n_anom = bundle.counts()
    print(f"wrote {len(files)} files to {data_dir(cfg)}: train {n_tr}, unlabeled normal {n_norm}, anomalous {n_anom}")


def cmd_train_detector(cfg: RunConfig):
    bundle = load_data(cfg)
    kw = {"kind": cfg.detector, "seed": sub_seed(cfg.seed, "detector") % 2**31}
    if cfg.detector_epochs is not None:
        kw["epochs"] = cfg.detector_epochs
    dcfg = det_mod.default_config(**kw)
    detector = det_mod.train_detector(bundle.X_train, dcfg, bundle.mean, bundle.std)
    thr = det_mod.calibrate_threshold(detector, bundle.X_train, cfg.tau_level)
    detector.save(detector_path(cfg))
    doc = json.loads(detector_path(cfg).read_text())
    doc["extra"].update({"tau": thr.tau, "tau_level": thr.level})
    detector_path(cfg).write_text(json.dumps(doc, indent=1))
    metrics = det_mod.detection_metrics(detector.score(bundle.X_unlabeled), bundle.y_unlabeled, thr.tau)
    _write_json(cfg.out_dir / f"metrics_{cfg.detector}.json", metrics)
    print(json.dumps(metrics, sort_keys=True))


def cmd_train_engine(cfg: RunConfig):
    bundle = load_data(cfg)
    problem = load_problem(cfg)
    if cfg.engine == "exact":
        print("exact engine selected: nothing to train")
        return
    kw = {"seed": sub_seed(cfg.seed, "engine") % 2**31}
    if cfg.engine_epochs is not None:
        kw["epochs"] = cfg.engine_epochs
    eng, report = train_engine(bundle.X_train, problem.scm.graph, EngineConfig(**kw), bundle.mean, bundle.std)
    eng.save(engine_path(cfg))
    with open(cfg.out_dir / "engine_log.csv", "w") as fh:
        fh.write("epoch,mean_loss\n")
        for e, v in enumerate(report.losses):
            fh.write(f"{e},{v!r}\n")
    print(f"engine trained={report.trained} recon_mse={report.recon_mse:.4f}")


def _recourse_inputs(cfg, need_engine=True):
    bundle = load_data(cfg)
    problem = load_problem(cfg)
    detector, tau = load_detector(cfg)
    engine = load_engine(cfg, problem, bundle) if (need_engine and cfg.baseline == "adcar") else \
        ExactEngine(problem.scm, bundle.mean, bundle.std)
    return bundle, problem, detector, tau, engine


def cmd_train_recourse(cfg: RunConfig):
    bundle, problem, detector, tau, engine = _recourse_inputs(cfg)
    setup = make_setup(cfg, problem, bundle, detector, tau, engine)
    rcfg = recourse_config(cfg)
    policy, tlog, report = ev.run_recourse(setup, rcfg)
    policy.save(policy_path(cfg), rcfg)
    tlog.write_csv(cfg.out_dir / f"recourse_log_{cfg.detector}_{cfg.baseline}.csv")
    print(json.dumps(report.row(), sort_keys=True))


def cmd_evaluate(cfg: RunConfig):
    bundle, problem, detector, tau, engine = _recourse_inputs(cfg, need_engine=False)
    _require(policy_path(cfg), f"{cfg.baseline} policy checkpoint")
    policy = ActionPolicy.load(policy_path(cfg))
    setup = make_setup(cfg, problem, bundle, detector, tau, engine)
    report = ev.evaluate_policy(setup, policy)
    metrics = det_mod.detection_metrics(detector.score(bundle.X_unlabeled), bundle.y_unlabeled, tau)
    _write_json(cfg.out_dir / f"metrics_{cfg.detector}.json", metrics)
    stem = cfg.out_dir / f"report_{cfg.detector}_{cfg.baseline}"
    ev.write_csv(stem.with_suffix(".csv"), [report.row()])
    stem.with_suffix(".txt").write_text(ev.format_reports([report.row()]))
    print(json.dumps({**metrics, **report.row()}, sort_keys=True))


def cmd_sweep(cfg: RunConfig):
    bundle, problem, detector, tau, engine = _recourse_inputs(cfg)
    setup = make_setup(cfg, problem, bundle, detector, tau, engine)
    if cfg.values:
        values = list(cfg.values)
    elif cfg.param == "lambda":
        values = ev.LAMBDA_GRID_AE if cfg.detector == "ae" else ev.LAMBDA_GRID
    else:
        values = ev.ALPHA_GRID
    grid = ev.run_sweep(setup, cfg.param, values, recourse_config(cfg))
    stem = cfg.out_dir / f"sweep_{cfg.param}_{cfg.detector}_{cfg.baseline}"
    ev.write_csv(stem.with_suffix(".csv"), grid.rows())
    stem.with_suffix(".txt").write_text(ev.format_reports(grid.rows()))
    print(ev.format_reports(grid.rows()), end="")


def cmd_explain(cfg: RunConfig):
    bundle, problem, detector, tau, engine = _recourse_inputs(cfg)
    _require(policy_path(cfg), f"{cfg.baseline} policy checkpoint")
    setup = make_setup(cfg, problem, bundle, detector, tau, engine)
    if not 0 <= cfg.index < len(setup.X):
        raise CliError(EXIT_ARGUMENT, f"--index {cfg.index} out of range: {len(setup.X)} detected anomalies")
    x, u = setup.X[cfg.index:cfg.index + 1], setup.U[cfg.index:cfg.index + 1]
    policy = ActionPolicy.load(policy_path(cfg))
    theta = policy.predict_action(x)
    exact = problem.scm.counterfactual_exact(x, u, theta)
    if cfg.baseline == "naive":
        est = x + theta
    elif isinstance(engine, ExactEngine):
        est = exact
    else:
        est = engine.counterfactual_soft(x, theta, topological(engine, problem.actionable))
    other = {}
    if cfg.baseline == "adcar" and policy_path(cfg, "naive").exists():
        nt = ActionPolicy.load(policy_path(cfg, "naive")).predict_action(x)
        other = {"naive_theta": nt, "naive_exact": problem.scm.counterfactual_exact(x, u, nt)}
    text = ev.case_report(bundle.nodes, x, theta, est, exact, problem.rule.raw, problem.actionable,
                          label_name=problem.rule.name, **other)
    (cfg.out_dir / f"case_{cfg.detector}_{cfg.baseline}_{cfg.index}.txt").write_text(text)
    print(text, end="")


HANDLERS = {
    "generate": cmd_generate, "train-detector": cmd_train_detector, "train-engine": cmd_train_engine,
    "train-recourse": cmd_train_recourse, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "explain": cmd_explain,
}


# ------------------------------------------------------------------ parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_ARGUMENT, f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="causal-recourse", description="Causal algorithmic recourse for detected anomalies.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--dataset", choices=["loan", "adult", "custom"])
    p.add_argument("--scm", help="custom SCM JSON (with --dataset custom)")
    p.add_argument("--detector", choices=["ae", "svdd"])
    p.add_argument("--engine", choices=["learned", "exact"])
    p.add_argument("--baseline", choices=["adcar", "naive"])
    p.add_argument("--actionable", type=lambda s: [v for v in s.split(",") if v])
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau-level", dest="tau_level", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-unlabeled", dest="n_unlabeled", type=int)
    p.add_argument("--n-anomalous", dest="n_anomalous", type=int)
    p.add_argument("--detector-epochs", dest="detector_epochs", type=int)
    p.add_argument("--engine-epochs", dest="engine_epochs", type=int)
    p.add_argument("--policy-epochs", dest="policy_epochs", type=int)
    p.add_argument("--policy-lr", dest="policy_lr", type=float)
    p.add_argument("--index", type=int)
    p.add_argument("--param", choices=["lambda", "alpha"])
    p.add_argument("--values", type=_floats)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_VALIDATION, f"config {args.config} is not valid JSON: {exc}") from None
        base.pop("command", None)
    names = {f.name for f in fields(RunConfig)}
    unknown = set(base) - names
    if unknown:
        raise CliError(EXIT_VALIDATION, f"unknown config keys {sorted(unknown)}")
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    cfg = RunConfig(**base)
    cfg.validate()
    return cfg


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        cfg = resolve_config(args)
        try:
            cfg.out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(cfg.out_dir / f"config_{args.command}.json", {"command": args.command, **asdict(cfg)})
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write to output directory {cfg.out}: {exc}") from None
        HANDLERS[args.command](cfg)
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CycleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv: list[str] | None = None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
