"""PPO on raw pixels and on the encoders a session produced, one curve file per seed.

    python scripts/rl_matrix.py runs/desk --seeds 3 --timesteps 150000
"""

import argparse
import logging
from pathlib import Path

from contsrl import flatland as fl
from contsrl import rlpolicy as rl
from contsrl.harness import plots


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("run", type=Path, help="session output directory (holds checkpoints/)")
    ap.add_argument("--tasks", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--master-seed", type=int, default=0)
    ap.add_argument("--timesteps", type=int, default=rl.PpoConfig.total_timesteps)
    ap.add_argument("--out", type=Path, help="defaults to <run>/rl")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    extractors = {"raw": rl.FeatureExtractor()}
    for kind in ("replay", "finetune"):
        ckpts = sorted((args.run / "checkpoints").glob(f"stage*-{kind}.ckpt"))
        if ckpts:
            extractors[kind] = rl.FeatureExtractor(rl.VAE, checkpoint=str(ckpts[-1]))
    tasks = {f"task{v}": fl.variant(v) for v in args.tasks}
    out = args.out or args.run / "rl"
    seeds = [1000 * args.master_seed + i for i in range(args.seeds)]
    res = rl.evaluate_matrix(extractors, tasks, rl.PpoConfig(total_timesteps=args.timesteps), seeds, out)
    for t, env in tasks.items():
        base = rl.random_baseline(env)
        for e in extractors:
            cell = res[(e, t)]
            print(f"{e:>8s} {t}: {cell.mean:7.2f} +- {cell.stderr:.2f}  (random {base:.2f})")
    plots.emit_plots(out, expected_seeds=args.seeds)


if __name__ == "__main__":
    main()
