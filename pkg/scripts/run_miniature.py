"""Train the toy scorer on the synthetic token task in both projection modes."""
import argparse
import time

from tokenfocus.experiments import MiniatureConfig, run_miniature
from tokenfocus.score_core import ProjectionMode
from tokenfocus.toy_scorer import TrainingConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--n-train", type=int, default=1000)
    ap.add_argument("--n-eval", type=int, default=200)
    args = ap.parse_args()
    print(f"{'mode':<14}{'init loss':>11}{'final loss':>12}{'ratio':>8}{'SRCC':>8}{'PLCC':>8}{'sec':>6}")
    for mode in ProjectionMode:
        cfg = MiniatureConfig(n_train=args.n_train, n_eval=args.n_eval, mode=mode,
                              training=TrainingConfig.desk_scale(seed=args.seed, epochs=args.epochs))
        start = time.perf_counter()
        r = run_miniature(cfg)
        print(f"{mode.value:<14}{r.initial_loss:>11.4f}{r.final_loss:>12.4f}{r.loss_ratio:>8.3f}"
              f"{r.eval_srcc:>8.4f}{r.eval_plcc:>8.4f}{time.perf_counter() - start:>6.1f}")


if __name__ == "__main__":
    main()
