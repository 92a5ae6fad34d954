"""Learned counterfactual engine vs the exact SCM on random actions."""
from _args import parse, parser

from causal_recourse import experiments as X


def main():
    p = parser(__doc__)
    p.add_argument("--datasets", default="loan,adult")
    args = parse(p)
    for name in args.datasets.split(","):
        prob = X.problem(name, args.seed)
        eng, secs = X.engine(prob, args.cache)
        f = X.fidelity(prob, eng)
        rms = " ".join(f"{n}={v:.3f}" for n, v in zip(prob.bundle.nodes, f["identity_rms"]))
        print(f"{name}: MSE {f['mse']:.3f} SSE {f['sse']:.3f} (train {secs:.0f} s)")
        print(f"  identity standardized RMS: {rms}")


if __name__ == "__main__":
    main()
