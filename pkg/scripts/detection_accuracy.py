"""Detection true/false positive rates of a trained VAE checkpoint.

    python scripts/detection_accuracy.py runs/desk/checkpoints/stage0.ckpt --env-b 2 --trials 200
"""

import argparse
from pathlib import Path

from contsrl import flatland as fl
from contsrl import replay
from contsrl import vae
from contsrl.harness import metrics
from contsrl.harness.experiments import ACCURACY_HEADER, ALPHAS, accuracy_rows, detection_accuracy


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--env-a", type=int, default=1)
    ap.add_argument("--env-b", type=int, default=2)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--states-per-episode", type=int, default=replay.SessionConfig.states_per_episode,
                    help="0 uses every state of an episode")
    ap.add_argument("--csv", type=Path)
    args = ap.parse_args()

    session = replay.SessionConfig(states_per_episode=args.states_per_episode or None)
    env_a, env_b = fl.variant(args.env_a), fl.variant(args.env_b)
    trials = detection_accuracy(vae.load_checkpoint(args.checkpoint), env_a, env_b, args.trials, args.seed, session)
    rows = accuracy_rows(trials, env_a, env_b, ALPHAS)
    for _, _, alpha, n, tpr, fpr in rows:
        print(f"alpha={alpha:<7g} tpr={tpr:.3f} fpr={fpr:.3f} (n={n})")
    if args.csv:
        metrics.write_rows(args.csv, ACCURACY_HEADER, rows)


if __name__ == "__main__":
    main()
