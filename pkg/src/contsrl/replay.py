"""Sequential VAE training across environments: generative replay, fine-tuning,
early stopping and the detect-then-retrain session loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detector as det
from . import flatland as fl
from . import numcore as nc
from . import vae as vae_mod
from .harness import metrics
from .harness.ledger import IoLedger
from .harness.seeding import child_rng, child_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainRunConfig:
    max_epochs: int = 40
    early_stop_threshold: float = 1e-3
    patience_epochs: int = 5
    batch_size: int = 128
    rng_seed: int = 0
    val_fraction: float = 0.02
    lr: float = 1e-3
    # Multiplier on the per-pixel recon term inside the training objective only.
    # None means width * channels, i.e. a per-image sum, which keeps the KL term
    # from collapsing the posterior. Validation and early stopping stay per-pixel.
    recon_scale: float | None = None

    def __post_init__(self):
        if self.early_stop_threshold <= 0:
            raise ValueError("early_stop_threshold must be positive")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_recon: float
    train_kl: float
    kl_weight: float
    val_recon: float


@dataclass
class Checkpoint:
    epoch: int
    params: vae_mod.VaeParams
    val_recon: float


def split_validation(n: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Every k-th index is held out, k = round(1/fraction)."""
    stride = max(2, int(round(1.0 / fraction)))
    idx = np.arange(n)
    val = idx % stride == stride // 2
    if not val.any():
        val[0] = True
    return idx[~val], idx[val]


def _val_recon(params, states) -> float:
    return float(np.mean(vae_mod.recon_errors(params, states)))


def train_vae(params: vae_mod.VaeParams, config: TrainRunConfig,
              dataset: np.ndarray) -> tuple[vae_mod.VaeParams, list[EpochRecord]]:
    """Mini-batch Adam training with per-batch KL annealing and early stopping.

    An epoch counts as an improvement when the validation reconstruction error
    drops below the best so far by more than ``early_stop_threshold``. After
    ``patience_epochs`` epochs without one, training stops and the checkpoint
    from just before that window is returned. The same checkpoint is returned
    if ``max_epochs`` runs out first.
    """
    dataset = np.asarray(dataset, dtype=float)
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset of {len(dataset)} states is smaller than batch_size={config.batch_size}")
    rng = np.random.default_rng(config.rng_seed)
    params = params.copy()
    train_idx, val_idx = split_validation(len(dataset), config.val_fraction)
    val_states = dataset[val_idx]
    state = nc.AdamState.init(params.tensors, lr=config.lr)
    scale = config.recon_scale
    if scale is None:
        scale = float(params.config.width * params.config.channels)
    names = list(params.tensors)
    for t in params.tensors.values():
        t.requires_grad = True

    best = Checkpoint(0, params.copy(), _val_recon(params, val_states))
    curve = [EpochRecord(0, float("nan"), float("nan"), float("nan"), params.kl_weight, best.val_recon)]
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        sums = np.zeros(3)
        n_batches = 0
        for s in range(0, len(order), config.batch_size):
            x = dataset[order[s:s + config.batch_size]]
            with nc.Tape() as tape:
                total, br = vae_mod.loss_tensor(params, x, rng, scale)
            if not np.isfinite(br.total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: recon={br.recon}, kl={br.kl}, "
                    f"kl_weight={br.kl_weight}")
            grads = tape.gradient(total, [params.tensors[k] for k in names])
            nc.adam_step(params.tensors, dict(zip(names, grads)), state)
            params.batches_seen += 1
            sums += (br.total, br.recon, br.kl)
            n_batches += 1
        val = _val_recon(params, val_states)
        means = sums / n_batches
        curve.append(EpochRecord(epoch, *means, params.kl_weight, val))
        logger.info("epoch %d loss=%.5f recon=%.5f kl=%.3f w=%.4f val=%.6f",
                    epoch, *means, params.kl_weight, val)
        if val < best.val_recon - config.early_stop_threshold:
            best = Checkpoint(epoch, params.copy(), val)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience_epochs:
                logger.info("early stop at epoch %d, restoring epoch %d", epoch, best.epoch)
                break
    out = best.params
    for t in out.tensors.values():
        t.requires_grad = False
    out.meta["best_epoch"] = str(best.epoch)
    return out, curve


def joint_replay_dataset(old_params: vae_mod.VaeParams, new_dataset: np.ndarray,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """New real states followed by an equal number of states generated from
    ``old_params``. Returns (states, is_generated mask)."""
    if len(new_dataset) == 0:
        raise ValueError("new_dataset is empty")
    generated = vae_mod.sample_prior(old_params, len(new_dataset), rng)
    joint = np.concatenate([np.asarray(new_dataset, dtype=float), generated])
    mask = np.r_[np.zeros(len(new_dataset), bool), np.ones(len(generated), bool)]
    perm = rng.permutation(len(joint))
    return joint[perm], mask[perm]


def generative_replay_step(old_params: vae_mod.VaeParams, new_dataset: np.ndarray,
                           config: TrainRunConfig) -> vae_mod.VaeParams:
    rng = np.random.default_rng(child_seed(config.rng_seed, "replay-samples"))
    joint, _ = joint_replay_dataset(old_params, new_dataset, rng)
    params, _ = train_vae(old_params, config, joint)
    return params


def finetune_step(old_params: vae_mod.VaeParams, new_dataset: np.ndarray,
                  config: TrainRunConfig) -> vae_mod.VaeParams:
    if len(new_dataset) == 0:
        raise ValueError("new_dataset is empty")
    params, _ = train_vae(old_params, config, new_dataset)
    return params


# ---------------------------------------------------------------------------
# session


@dataclass(frozen=True)
class SessionConfig:
    collect_episodes: int = 200
    eval_episodes: int = 2
    eval_samples: int = 500
    n_groups: int = 10
    episodes_per_group: int = 20
    states_per_episode: int | None = 25
    alpha: float = 0.01
    baseline_finetune: bool = True
    train: TrainRunConfig = TrainRunConfig()
    vae: vae_mod.VaeConfig = vae_mod.VaeConfig()
    seed: int = 0


@dataclass
class Detection:
    transition: str
    result: det.WelchResult


@dataclass
class SessionReport:
    out_dir: Path
    stages: list[str] = field(default_factory=list)
    checkpoints: dict[str, Path] = field(default_factory=dict)
    models: dict[str, vae_mod.VaeParams] = field(default_factory=dict)
    detections: list[Detection] = field(default_factory=list)
    mse: dict[tuple[str, str], float] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)
    train_datasets: dict[str, Path] = field(default_factory=dict)
    ledger: IoLedger | None = None


def env_label(i: int, cfg: fl.WorldConfig) -> str:
    return f"env{i}:v{cfg.variant_id}"


def continual_session(env_sequence: list[fl.WorldConfig], config: SessionConfig,
                      out_dir) -> SessionReport:
    """Train on the first environment, then for each later one test for a
    change and retrain with generative replay when one is detected."""
    if not env_sequence:
        raise ValueError("need at least one environment")
    out = Path(out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    for name in ("mse_matrix.csv", "detections.csv", "io_ledger.csv"):
        (out / name).unlink(missing_ok=True)
    ledger = IoLedger(out / "io_ledger.csv")
    report = SessionReport(out, ledger=ledger)
    seed = config.seed
    batch_kw = dict(n_groups=config.n_groups, episodes_per_group=config.episodes_per_group,
                    states_per_episode=config.states_per_episode)

    def train_cfg(tag):
        return replace(config.train, rng_seed=child_seed(seed, "train", tag))

    def collect(i, env, stage):
        path = out / "data" / f"env{i}_v{env.variant_id}_train.rsrl"
        states = fl.collect_random(env, config.collect_episodes, seed=child_seed(seed, "collect", i))
        ledger.write_dataset(path, states, stage)
        report.train_datasets[stage] = path
        return ledger.read_dataset(path, stage)

    def keep(stage, params):
        path = out / "checkpoints" / f"{stage}.ckpt"
        vae_mod.save_checkpoint(params, path, stage=stage)
        report.stages.append(stage)
        report.checkpoints[stage] = path
        report.models[stage] = params
        report.param_counts[stage] = params.n_params()

    data0 = collect(0, env_sequence[0], "stage0")
    init = vae_mod.init_params(config.vae, child_rng(seed, "init"))
    report.param_counts["init"] = init.n_params()
    current, _ = train_vae(init, train_cfg(0), data0)
    del data0
    keep("stage0", current)
    finetuned = current
    reference = det.build_batch(current, env_sequence[0], rng=child_rng(seed, "ref", 0), **batch_kw)
    trained_on = [0]

    stage_no = 0
    for i in range(1, len(env_sequence)):
        env = env_sequence[i]
        fresh = det.build_batch(current, env, rng=child_rng(seed, "probe", i), **batch_kw)
        res = det.detect_change(reference, fresh, config.alpha)
        name = f"{env_label(i - 1, env_sequence[i - 1])}->{env_label(i, env)}"
        report.detections.append(Detection(name, res))
        metrics.append_row(out / "detections.csv", metrics.DETECTION_HEADER,
                           (name, res.t, res.nu, res.p_value, res.changed))
        logger.info("transition %s: t=%.3f nu=%.2f p=%.3g changed=%s", name, res.t, res.nu, res.p_value,
                    res.changed)
        if not res.changed:
            continue
        stage_no += 1
        stage = f"stage{stage_no}-replay"
        data = collect(i, env, stage)
        current = generative_replay_step(current, data, train_cfg(stage_no))
        keep(stage, current)
        if config.baseline_finetune:
            ft_stage = f"stage{stage_no}-finetune"
            ledger.record("read", report.train_datasets[stage], ft_stage)
            finetuned = finetune_step(finetuned, data, train_cfg(stage_no))
            keep(ft_stage, finetuned)
        del data
        trained_on.append(i)
        reference = det.build_batch(current, env, rng=child_rng(seed, "ref", i), **batch_kw)

    # reconstruction matrix over every distinct environment
    seen: dict[str, np.ndarray] = {}
    for j, env in enumerate(env_sequence):
        label = f"v{env.variant_id}"
        if label in seen:
            continue
        path = out / "data" / f"eval_{label}.rsrl"
        states = fl.collect_random(env, config.eval_episodes, seed=child_seed(seed, "eval", env.variant_id))
        ledger.write_dataset(path, states, "eval")
        seen[label] = ledger.read_dataset(path, "eval")
    for stage in report.stages:
        for label, states in seen.items():
            mse = metrics.eval_mse(report.models[stage], states, config.eval_samples,
                                   seed=child_seed(seed, "eval-order", label),
                                   csv_path=out / "mse_matrix.csv", stage=stage, environment=label)
            report.mse[(stage, label)] = mse
    return report
