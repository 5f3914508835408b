"""Time the linear kernel against the softmax oracle and fit log-log slopes.

    python scripts/run_scaling.py --out-dir results/scaling
"""
import argparse
from pathlib import Path

from taylorformer import analysis


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="results/scaling")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--dim", type=int, default=16)
    args = ap.parse_args()

    runs = {
        "tmsa_linear": [1024, 4096, 16384, 65536],
        "softmax": [256, 512, 1024, 2048],
        "tmsa_quadratic": [256, 512, 1024, 2048],
        "noop": [1024, 4096, 16384, 65536],
    }
    reports = [analysis.bench_scaling(op, sizes, args.reps, args.dim) for op, sizes in runs.items()]
    for rep in reports:
        print(f"{rep.op:15s} slope {rep.slope:6.3f}  residual {rep.residual:.3f}")
    out = Path(args.out_dir)
    analysis.write_csv(out / "scaling.csv", [row for rep in reports for row in rep.rows()])
    analysis.write_loglog_svg(out / "scaling.svg", reports[:3])
    print(f"wrote {out}/scaling.csv and scaling.svg")


if __name__ == "__main__":
    main()
