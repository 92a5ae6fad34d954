"""Lambda and alpha sweeps on Loan with Deep SVDD (policy retrained per value)."""
from pathlib import Path

from _args import parse, parser

from causal_recourse import evaluation as ev
from causal_recourse import experiments as X


def main():
    p = parser(__doc__)
    p.add_argument("--out", default="runs/sweeps")
    args = parse(p)
    prob = X.problem("loan", args.seed)
    det, tau, _ = X.detector(prob, "svdd", args.cache)
    eng, _ = X.engine(prob, args.cache)
    setup = X.setup(prob, det, tau, eng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for param, values in (("lambda", ev.LAMBDA_GRID), ("alpha", ev.ALPHA_GRID)):
        grid = ev.run_sweep(setup, param, values, X.recourse_config("loan"))
        ev.write_csv(out / f"sweep_{param}.csv", grid.rows())
        print(ev.format_reports(grid.rows()))


if __name__ == "__main__":
    main()
