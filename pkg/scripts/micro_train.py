"""Fit one attention block to synthetic denoising and dump the loss curve.

    python scripts/micro_train.py --steps 500 --out-dir results/micro
"""
import argparse
import logging
from pathlib import Path

from taylorformer import analysis
from taylorformer.training import DEFAULT_LR, MicroTask, micro_train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=DEFAULT_LR)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--out-dir", default="results/micro")
    args = ap.parse_args()
    logging.basicConfig(level=logging.DEBUG, format="%(message)s")

    state = micro_train(MicroTask(sigma=args.sigma, seed=args.seed), args.steps, args.lr)
    first, last = state.loss_history[0], state.loss_history[-1]
    print(f"loss {first:.5f} -> {last:.5f} ({last / first:.3f}x), s 0.5 -> {state.s:.4f}")
    analysis.write_csv(Path(args.out_dir) / "loss_history.csv",
                       [{"step": i, "loss": v} for i, v in enumerate(state.loss_history)])


if __name__ == "__main__":
    main()
