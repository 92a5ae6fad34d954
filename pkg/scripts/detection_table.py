"""Detection quality of the AE and Deep SVDD detectors on Loan and Adult."""
from _args import parse, parser

from causal_recourse import detectors as D
from causal_recourse import evaluation as ev
from causal_recourse import experiments as X


def main():
    args = parse(parser(__doc__))
    rows = []
    for name, kinds in (("loan", ("ae", "svdd")), ("adult", ("ae", "svdd"))):
        p = X.problem(name, args.seed)
        for kind in kinds:
            det, tau, secs = X.detector(p, kind, args.cache)
            m = D.detection_metrics(det.score(p.bundle.X_unlabeled), p.bundle.y_unlabeled, tau)
            rows.append([name, kind, f"{m['f1']:.3f}", f"{m['auroc']:.4f}", f"{m['auprc']:.3f}", m["n_detected"],
                         f"{secs:.0f}"])
    print(ev.text_table(["dataset", "detector", "F1", "AUROC", "AUPRC", "detected", "train s"], rows), end="")


if __name__ == "__main__":
    main()
