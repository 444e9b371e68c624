"""Full desk-scale experiment: session, detection accuracy, RL matrix, plots.

    python scripts/run_desk.py --out runs/desk --seed 0
    python scripts/run_desk.py --config my.cfg --no-rl
"""

import argparse
import logging
from pathlib import Path

from contsrl.harness import config, metrics
from contsrl.harness.experiments import run_desk, with_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--scale", choices=config.SCALES, default="desk")
    ap.add_argument("--environments", type=int, nargs="+", help="override the environment sequence")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path)
    ap.add_argument("--no-rl", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    exp = config.load(args.config) if args.config else config.preset(args.scale)
    if args.seed is not None:
        exp = with_seed(exp, args.seed)
    if args.environments:
        from dataclasses import replace
        exp = replace(exp, environments=tuple(args.environments))
    out = args.out or exp.output
    res = run_desk(exp, out, with_rl=not args.no_rl)

    print("stages:", ", ".join(res.report.stages))
    for row in metrics.read_rows(out / "mse_matrix.csv"):
        print(f"  mse {row['stage']:>18s} {row['environment']}: {float(row['mse']):.5f}")
    for d in res.report.detections:
        print(f"  detection {d.transition}: p={d.result.p_value:.3g} changed={d.result.changed}")
    for (a, b), trials in res.accuracy.items():
        tpr, fpr = trials.rates(exp.session.alpha)
        print(f"  accuracy v{a} vs v{b}: tpr={tpr:.3f} fpr={fpr:.3f} over {len(trials.p_diff)} trials")
    if res.rl:
        for (e, t), cell in sorted(res.rl.items()):
            print(f"  rl {e:>8s} {t}: {cell.mean:7.2f} +- {cell.stderr:.2f} (random {res.baselines[t]:.2f})")


if __name__ == "__main__":
    main()
