"""Flipping ratios and action norms of ADCAR and NaiveAR over several seeds."""
import numpy as np
from _args import parse, parser

from causal_recourse import evaluation as ev
from causal_recourse import experiments as X

RUNS = {"loan": "svdd", "adult": "ae"}


def main():
    p = parser(__doc__)
    p.add_argument("--datasets", default="loan,adult")
    p.add_argument("--seeds", type=int, default=5)
    args = parse(p)
    rows = []
    for name in args.datasets.split(","):
        prob = X.problem(name, args.seed)
        det, tau, _ = X.detector(prob, RUNS[name], args.cache)
        eng, _ = X.engine(prob, args.cache)
        setup = X.setup(prob, det, tau, eng)
        res = X.compare_baselines(setup, X.recourse_config(name), range(args.seeds))
        for base, reps in res.items():
            summ = ev.SeedSummary(len(reps), reps)
            cells = [name, RUNS[name], base, reps[0].n_detected]
            for field in ("flip_ratio_detector", "flip_ratio_ground_truth", "norm_mean"):
                m, s = summ.stat(field)
                cells.append("undefined" if np.isnan(m) else f"{m:.3f} +- {s:.3f}")
            rows.append(cells)
    print(ev.text_table(["dataset", "detector", "method", "detected", "Y-hat", "Y", "norm"], rows), end="")


if __name__ == "__main__":
    main()
