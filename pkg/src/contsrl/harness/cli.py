"""Command-line entry point: ``python -m contsrl <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import detector as det
from .. import flatland as fl
from .. import replay
from .. import rlpolicy as rl
from .. import vae as vae_mod
from . import config as config_mod
from . import metrics, plots
from .experiments import with_seed
from .seeding import child_rng, child_seed

logger = logging.getLogger("contsrl")

EXIT_CHANGE = 10


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="contsrl", description="Continual state-representation learning experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect random-policy states into a dataset file")
    p.add_argument("--variant", type=int, required=True, choices=sorted(fl.VARIANT_COLORS))
    p.add_argument("--episodes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="experiment config; only its [world] section is used")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-vae", help="train (or continue training) a VAE on dataset files")
    p.add_argument("--data", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path to write")
    p.add_argument("--init", type=Path, help="checkpoint to continue from")
    p.add_argument("--replay-from", type=Path,
                   help="old checkpoint to draw as many generated states as there are real ones (generative replay)")
    p.add_argument("--max-epochs", type=int, default=replay.TrainRunConfig.max_epochs)
    p.add_argument("--batch-size", type=int, default=replay.TrainRunConfig.batch_size)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("session", help="run a continual-learning session from a config file")
    p.add_argument("--config", type=Path)
    p.add_argument("--scale", choices=config_mod.SCALES, help="preset to use when no config is given")
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("detect", help="Welch t-test between two batches; exit 10 on a detected change")
    p.add_argument("--batches", type=Path, nargs=2, metavar=("A.csv", "B.csv"))
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--env-a", type=int, choices=sorted(fl.VARIANT_COLORS))
    p.add_argument("--env-b", type=int, choices=sorted(fl.VARIANT_COLORS))
    p.add_argument("--groups", type=int, default=10)
    p.add_argument("--episodes-per-group", type=int, default=20)
    p.add_argument("--states-per-episode", type=int)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-rl", help="train PPO policies on one task and write reward curves")
    p.add_argument("--mode", choices=(rl.RAW, rl.VAE, "raw", "vae"), default=rl.RAW)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--variant", type=int, default=1, choices=sorted(fl.VARIANT_COLORS))
    p.add_argument("--seed", type=int, nargs="+", default=[0])
    p.add_argument("--timesteps", type=int, default=rl.PpoConfig.total_timesteps)
    p.add_argument("--cell", help="extractor name used in file names (default: mode or checkpoint stem)")
    p.add_argument("--task", help="task name (default: task<variant>)")
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("eval-mse", help="reconstruction MSE of a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("-n", "--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", type=Path, help="append a row to this mse_matrix.csv")
    p.add_argument("--stage", default="")
    p.add_argument("--environment", default="")

    p = sub.add_parser("report", help="rebuild rl_table.csv and reward plots for a run directory")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--seeds", type=int, help="expected seeds per cell; fewer triggers a warning")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handler = COMMANDS[args.command]
    try:
        return handler(args) or 0
    except (OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"contsrl {args.command}: error: {exc}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# commands


def cmd_collect(args) -> int:
    exp = config_mod.load(args.config) if args.config else config_mod.preset()
    env = exp.world_config(args.variant)
    states = fl.collect_random(env, args.episodes, seed=args.seed)
    out = args.out or Path(f"env{args.variant}_seed{args.seed}.rsrl")
    out.parent.mkdir(parents=True, exist_ok=True)
    fl.save_dataset(out, states)
    print(f"{out},{len(states)}")
    return 0


def cmd_train_vae(args) -> int:
    data = np.concatenate([fl.load_dataset(p) for p in args.data]).astype(float)
    cfg = replay.TrainRunConfig(max_epochs=args.max_epochs, batch_size=args.batch_size,
                                rng_seed=child_seed(args.seed, "train-vae"))
    if args.init:
        params = vae_mod.load_checkpoint(args.init)
    else:
        params = vae_mod.init_params(rng=child_rng(args.seed, "init"))
    if args.replay_from:
        old = vae_mod.load_checkpoint(args.replay_from)
        data, _ = replay.joint_replay_dataset(old, data, child_rng(args.seed, "replay-samples"))
    trained, curve = replay.train_vae(params, cfg, data)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    vae_mod.save_checkpoint(trained, args.out, sources=";".join(map(str, args.data)))
    metrics.write_rows(args.out.with_name(args.out.name + ".curve.csv"),
                       ("epoch", "train_loss", "train_recon", "train_kl", "kl_weight", "val_recon"),
                       [(r.epoch, r.train_loss, r.train_recon, r.train_kl, r.kl_weight, r.val_recon) for r in curve])
    print(f"{args.out},best_epoch={trained.meta['best_epoch']}")
    return 0


def cmd_session(args) -> int:
    exp = config_mod.load(args.config) if args.config else config_mod.preset(args.scale or "desk")
    if args.seed is not None:
        exp = with_seed(exp, args.seed)
    out = args.out or exp.output
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.cfg").write_text(exp.to_text())
    report = replay.continual_session(exp.env_sequence(), exp.session, out)
    for d in report.detections:
        print(f"{d.transition},{d.result.t!r},{d.result.nu!r},{d.result.p_value!r},{int(d.result.changed)}")
    print(f"stages: {', '.join(report.stages)}")
    return 0


def cmd_detect(args) -> int:
    if args.batches:
        b1, b2 = (det.read_batch_csv(p) for p in args.batches)
    elif args.checkpoint and args.env_a and args.env_b:
        params = vae_mod.load_checkpoint(args.checkpoint)
        kw = dict(n_groups=args.groups, episodes_per_group=args.episodes_per_group,
                  states_per_episode=args.states_per_episode)
        b1 = det.build_batch(params, fl.variant(args.env_a), rng=child_rng(args.seed, "detect", "a"), **kw)
        b2 = det.build_batch(params, fl.variant(args.env_b), rng=child_rng(args.seed, "detect", "b"), **kw)
    else:
        raise ValueError("give either --batches A B or --checkpoint with --env-a and --env-b")
    res = det.detect_change(b1, b2, args.alpha)
    print(f"{res.t!r},{res.nu!r},{res.p_value!r},{int(res.changed)}")
    return EXIT_CHANGE if res.changed else 0


def cmd_train_rl(args) -> int:
    mode = {"raw": rl.RAW, "vae": rl.VAE}.get(args.mode, args.mode)
    fe = rl.FeatureExtractor(mode, checkpoint=str(args.checkpoint) if args.checkpoint else None)
    cell = args.cell or (args.checkpoint.stem if mode == rl.VAE else "raw")
    task = args.task or f"task{args.variant}"
    cfg = rl.PpoConfig(total_timesteps=args.timesteps)
    args.out.mkdir(parents=True, exist_ok=True)
    res = rl.evaluate_matrix({cell: fe}, {task: fl.variant(args.variant)}, cfg, seeds=args.seed)
    for (_, _), r in res.items():
        for s, c in zip(args.seed, r.curves):
            c.write_csv(args.out / f"curve_{cell}-{task}_{s}.csv")
    upsert_rl_table(args.out / "rl_table.csv", [(r.extractor, r.task, r.mean, r.stderr) for r in res.values()])
    r = res[(cell, task)]
    print(f"{cell},{task},{r.mean!r},{r.stderr!r}")
    return 0


def cmd_eval_mse(args) -> int:
    params = vae_mod.load_checkpoint(args.checkpoint)
    data = fl.load_dataset(args.data).astype(float)
    mse = metrics.eval_mse(params, data, args.n, seed=args.seed, csv_path=args.csv,
                           stage=args.stage, environment=args.environment)
    print(repr(mse))
    return 0


def cmd_report(args) -> int:
    run = args.run
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    for name in ("mse_matrix.csv", "detections.csv"):
        if not (run / name).exists():
            logger.warning("%s missing from %s", name, run)
    rows = rl_table_from_curves(run)
    if rows:
        metrics.write_rows(run / "rl_table.csv", metrics.RL_TABLE_HEADER, rows)
        print(run / "rl_table.csv")
    for p in plots.emit_plots(run, expected_seeds=args.seeds):
        print(p)
    return 0


COMMANDS = {"collect": cmd_collect, "train-vae": cmd_train_vae, "session": cmd_session, "detect": cmd_detect,
            "train-rl": cmd_train_rl, "eval-mse": cmd_eval_mse, "report": cmd_report}


# ---------------------------------------------------------------------------
# helpers


def rl_table_from_curves(run_dir, final_points: int = rl.PpoConfig.final_points) -> list[tuple]:
    rows = []
    for (extractor, task), seeds in sorted(plots.find_curves(run_dir).items()):
        finals = np.array([rl.final_return(rl.RewardCurve.read_csv(p).mean_return, final_points)
                           for p in seeds.values()])
        finals = finals[np.isfinite(finals)]
        if finals.size == 0:
            continue
        se = float(np.std(finals, ddof=1) / np.sqrt(finals.size)) if finals.size > 1 else 0.0
        rows.append((extractor, task, float(finals.mean()), se))
    return rows


def upsert_rl_table(path: Path, rows) -> None:
    existing = {}
    if path.exists():
        for r in metrics.read_rows(path):
            existing[(r["extractor"], r["task"])] = (r["extractor"], r["task"], float(r["mean"]), float(r["stderr"]))
    for row in rows:
        existing[(row[0], row[1])] = row
    metrics.write_rows(path, metrics.RL_TABLE_HEADER, [existing[k] for k in sorted(existing)])


if __name__ == "__main__":
    sys.exit(main())
