"""5-fold toy scorers plus boosted-tree blending over several seeds; compares Blend with Avg."""
import argparse
import time

from tokenfocus.experiments import EnsembleConfig, report_rows, run_ensemble_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--no-generator-offset", action="store_true",
                    help="make the per-generator score offset zero (tokens alone determine the target)")
    args = ap.parse_args()
    cfg = EnsembleConfig(generator_offsets=not args.no_generator_offset)
    wins = 0
    print(f"{'seed':>4}{'Avg':>9}{'Fold-mean':>11}{'Blend':>9}{'sec':>6}")
    for seed in range(args.seeds):
        start = time.perf_counter()
        rows = report_rows(run_ensemble_seed(seed, cfg))
        avg, mean, blend = (rows[n]["srcc"] for n in ("Avg", "Fold-mean", "Blend"))
        wins += blend >= avg
        print(f"{seed:>4}{avg:>9.4f}{mean:>11.4f}{blend:>9.4f}{time.perf_counter() - start:>6.1f}")
    print(f"Blend >= Avg in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
