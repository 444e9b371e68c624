"""End-to-end experiment drivers shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .. import detector as det
from .. import flatland as fl
from .. import replay
from .. import rlpolicy as rl
from . import metrics, plots
from .config import ExperimentConfig
from .seeding import child_rng

logger = logging.getLogger(__name__)

ALPHAS = (0.05, 0.01, 0.001, 0.0001)
ACCURACY_HEADER = ("env_a", "env_b", "alpha", "trials", "tpr", "fpr")


def batch_kwargs(session: replay.SessionConfig) -> dict:
    return dict(n_groups=session.n_groups, episodes_per_group=session.episodes_per_group,
                states_per_episode=session.states_per_episode)


def detection_accuracy(vae_params, env_a: fl.WorldConfig, env_b: fl.WorldConfig, n_trials: int,
                       seed: int, session: replay.SessionConfig) -> det.AccuracyTrials:
    """p-values of ``n_trials`` same-env and cross-env comparisons, batched the way a session batches."""
    rng = child_rng(seed, "detection-accuracy", env_a.variant_id, env_b.variant_id)
    return det.accuracy_trials(vae_params, env_a, env_b, n_trials, rng, **batch_kwargs(session))


def accuracy_rows(trials: det.AccuracyTrials, env_a, env_b, alphas=ALPHAS) -> list[tuple]:
    rows = []
    for a in alphas:
        tpr, fpr = trials.rates(a)
        rows.append((f"v{env_a.variant_id}", f"v{env_b.variant_id}", a, len(trials.p_diff), tpr, fpr))
    return rows


def session_extractors(report: replay.SessionReport) -> dict[str, rl.FeatureExtractor]:
    """Raw pixels plus the encoders of the last replay and fine-tune stages."""
    out = {"raw": rl.FeatureExtractor()}
    for kind in ("replay", "finetune"):
        stages = [s for s in report.stages if s.endswith("-" + kind)]
        if stages:
            out[kind] = rl.FeatureExtractor(rl.VAE, checkpoint=str(report.checkpoints[stages[-1]]))
    return out


def task_envs(exp: ExperimentConfig) -> dict[str, fl.WorldConfig]:
    return {f"task{v}": exp.world_config(v) for v in dict.fromkeys(exp.environments)}


def rl_seeds(master: int, n: int) -> list[int]:
    return [1000 * master + i for i in range(n)]


def run_rl_matrix(exp: ExperimentConfig, report: replay.SessionReport, out_dir, master: int | None = None):
    master = exp.seed if master is None else master
    return rl.evaluate_matrix(session_extractors(report), task_envs(exp), exp.ppo,
                              seeds=rl_seeds(master, exp.rl_seeds), out_dir=out_dir)


@dataclass
class DeskResult:
    report: replay.SessionReport
    accuracy: dict[tuple[int, int], det.AccuracyTrials] = field(default_factory=dict)
    rl: dict | None = None
    baselines: dict[str, float] = field(default_factory=dict)
    # CPU seconds per phase; process time, so a throttled machine does not inflate it
    seconds: dict[str, float] = field(default_factory=dict)


def run_desk(exp: ExperimentConfig, out_dir=None, with_rl: bool = True) -> DeskResult:
    """Session, detection accuracy against the first stage's model, RL matrix, plots."""
    out = Path(out_dir) if out_dir is not None else exp.output
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.cfg").write_text(exp.to_text())
    t0 = time.process_time()
    report = replay.continual_session(exp.env_sequence(), exp.session, out)
    res = DeskResult(report)
    res.seconds["session"] = time.process_time() - t0
    t0 = time.process_time()
    first = exp.world_config(exp.environments[0])
    rows = []
    for v in dict.fromkeys(exp.environments[1:]):
        if v == first.variant_id:
            continue
        trials = detection_accuracy(report.models["stage0"], first, exp.world_config(v),
                                    exp.detection_trials, exp.seed, exp.session)
        res.accuracy[(first.variant_id, v)] = trials
        rows += accuracy_rows(trials, first, exp.world_config(v))
    if rows:
        metrics.write_rows(out / "detection_accuracy.csv", ACCURACY_HEADER, rows)
    res.seconds["detection"] = time.process_time() - t0
    if with_rl:
        t0 = time.process_time()
        rl_dir = out / "rl"
        res.rl = run_rl_matrix(exp, report, rl_dir)
        res.baselines = {t: rl.random_baseline(env, 64, seed=exp.seed) for t, env in task_envs(exp).items()}
        metrics.write_rows(rl_dir / "random_baseline.csv", ("task", "mean_return"), sorted(res.baselines.items()))
        plots.emit_plots(rl_dir, expected_seeds=exp.rl_seeds)
        res.seconds["rl"] = time.process_time() - t0
    return res


def with_seed(exp: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(exp, seed=seed, session=replace(exp.session, seed=seed))
