"""PPO over raw pixels or frozen VAE features."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import flatland as fl
from . import numcore as nc
from . import vae as vae_mod
from .harness import metrics
from .harness.seeding import child_seed
from .numcore import Tensor

logger = logging.getLogger(__name__)

RAW, VAE = "raw_pixels", "vae_latent"


@dataclass
class FeatureExtractor:
    mode: str = RAW
    vae: vae_mod.VaeParams | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.mode not in (RAW, VAE):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if self.mode == VAE and self.vae is None:
            if self.checkpoint is None:
                raise ValueError("vae_latent features need a VAE checkpoint")
            self.vae = vae_mod.load_checkpoint(self.checkpoint)

    def dim(self, width: int = 64) -> int:
        return width * 3 if self.mode == RAW else self.vae.config.latent

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return extract_features(self, obs)


def extract_features(fe: FeatureExtractor, obs: np.ndarray) -> np.ndarray:
    """[N, W, 3] (or a single [W, 3]) observations -> [N, dim] features."""
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    if fe.mode == RAW:
        out = obs.reshape(obs.shape[0], -1).copy()
    else:
        out = vae_mod.encode_mean(fe.vae, obs)
    return out[0] if single else out


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs_per_update: int = 4
    minibatch_size: int = 64
    rollout_length: int = 2048
    n_envs: int = 16
    lr: float = 2.5e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    total_timesteps: int = 150_000
    n_seeds: int = 5
    hidden: tuple[int, ...] = (64, 64)
    final_points: int = 4

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.rollout_length % self.n_envs:
            raise ValueError("rollout_length must be a multiple of n_envs")


# ---------------------------------------------------------------------------
# networks


def init_mlp(sizes, rng: np.random.Generator, out_scale: float = 1.0) -> dict[str, Tensor]:
    params = {}
    n = len(sizes) - 1
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = nc.glorot(rng, (a, b), a, b)
        if i == n - 1:
            w *= out_scale
        params[f"w{i}"] = Tensor(w, name=f"w{i}")
        params[f"b{i}"] = Tensor(np.zeros(b), name=f"b{i}")
    return params


def mlp_forward(params: dict[str, Tensor], x) -> Tensor:
    h = nc.as_tensor(x)
    n = len(params) // 2
    for i in range(n):
        h = nc.dense_forward(h, params[f"w{i}"], params[f"b{i}"])
        if i < n - 1:
            h = nc.relu(h)
    return h


@dataclass
class ActorCritic:
    policy: dict[str, Tensor]
    value: dict[str, Tensor]

    @classmethod
    def create(cls, obs_dim: int, hidden, rng: np.random.Generator) -> "ActorCritic":
        # small final policy layer keeps the initial policy near uniform
        return cls(init_mlp((obs_dim, *hidden, fl.N_ACTIONS), rng, out_scale=0.01),
                   init_mlp((obs_dim, *hidden, 1), rng))

    def all_params(self) -> dict[str, Tensor]:
        return {**{f"pi.{k}": v for k, v in self.policy.items()},
                **{f"v.{k}": v for k, v in self.value.items()}}

    def action_probs(self, feats: np.ndarray) -> np.ndarray:
        return np.exp(nc.log_softmax(mlp_forward(self.policy, feats)).data)

    def values(self, feats: np.ndarray) -> np.ndarray:
        return mlp_forward(self.value, feats).data[:, 0]


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])[:, None]
    return np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), probs.shape[1] - 1)


# ---------------------------------------------------------------------------
# advantages and loss


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, last_values: np.ndarray,
                gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates over a [T, n_envs] rollout.

    ``dones[t]`` marks that the episode ended after step t. Returns
    (advantages, returns) with returns = advantages + values.
    """
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        next_v = last_values if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


@dataclass
class Batch:
    feats: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def clipped_surrogate(ratio: Tensor, adv: np.ndarray, eps: float) -> Tensor:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    return nc.minimum(nc.mul(ratio, adv), nc.mul(nc.clip(ratio, 1.0 - eps, 1.0 + eps), adv))


def ppo_loss(ac: ActorCritic, batch: Batch, config: PpoConfig) -> tuple[Tensor, dict[str, float]]:
    """Scalar loss = -surrogate + value_coef * value MSE - entropy_coef * entropy."""
    logp_all = nc.log_softmax(mlp_forward(ac.policy, batch.feats))
    logp = nc.pick(logp_all, batch.actions)
    ratio = nc.exp(nc.sub(logp, batch.old_logp))
    if not np.all(np.isfinite(ratio.data)):
        raise FloatingPointError("non-finite probability ratio in PPO update")
    surr = nc.mean(clipped_surrogate(ratio, batch.advantages, config.clip_epsilon))
    v = mlp_forward(ac.value, batch.feats)[:, 0]
    v_loss = nc.mean(nc.square(nc.sub(v, batch.returns)))
    entropy = nc.mul(nc.mean(nc.sum(nc.mul(nc.exp(logp_all), logp_all), axis=1)), -1.0)
    loss = nc.add(nc.sub(nc.mul(v_loss, config.value_coef), surr), nc.mul(entropy, -config.entropy_coef))
    clip_frac = float(np.mean(np.abs(ratio.data - 1.0) > config.clip_epsilon))
    return loss, {"surrogate": surr.item(), "value_loss": v_loss.item(), "entropy": entropy.item(),
                  "clip_frac": clip_frac}


def ppo_update(ac: ActorCritic, batch: Batch, config: PpoConfig, opt: nc.AdamState,
               rng: np.random.Generator) -> dict[str, float]:
    """Several epochs of shuffled minibatch steps on one rollout."""
    params = ac.all_params()
    names = list(params)
    for p in params.values():
        p.requires_grad = True
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(adv)
    stats_acc: dict[str, float] = {}
    count = 0
    for _ in range(config.epochs_per_update):
        perm = rng.permutation(n)
        for s in range(0, n, config.minibatch_size):
            idx = perm[s:s + config.minibatch_size]
            mb = Batch(batch.feats[idx], batch.actions[idx], batch.old_logp[idx], adv[idx], batch.returns[idx])
            with nc.Tape() as tape:
                loss, stats = ppo_loss(ac, mb, config)
            grads = tape.gradient(loss, [params[k] for k in names])
            nc.adam_step(params, dict(zip(names, grads)), opt)
            for k, v in stats.items():
                stats_acc[k] = stats_acc.get(k, 0.0) + v
            count += 1
    for p in params.values():
        p.requires_grad = False
    return {k: v / count for k, v in stats_acc.items()}


# ---------------------------------------------------------------------------
# training


@dataclass
class RewardCurve:
    """Mean episode return logged after each rollout in which episodes ended.

    ``final`` averages the last ``final_points`` logged values, so it can be
    recomputed from the CSV alone. Rooms run in lockstep, so each point covers
    exactly ``n_envs`` episodes.
    """

    timesteps: np.ndarray
    mean_return: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    final_points: int = 4

    @property
    def final(self) -> float:
        return final_return(self.mean_return, self.final_points)

    def write_csv(self, path) -> None:
        metrics.write_rows(path, metrics.CURVE_HEADER, zip(self.timesteps.tolist(), self.mean_return.tolist()))

    @classmethod
    def read_csv(cls, path, final_points: int = 4) -> "RewardCurve":
        rows = metrics.read_rows(path)
        return cls(np.array([int(r["timesteps"]) for r in rows], dtype=np.int64),
                   np.array([float(r["mean_return"]) for r in rows]), [], final_points)


def final_return(mean_return, points: int) -> float:
    tail = np.asarray(mean_return, dtype=float)[-points:]
    return float(np.mean(tail)) if tail.size else float("nan")


def train_policy(env_config: fl.WorldConfig, fe: FeatureExtractor, config: PpoConfig,
                 seed: int) -> tuple[ActorCritic, RewardCurve]:
    """PPO from scratch on one task; deterministic given ``seed``."""
    rng = np.random.default_rng(child_seed(seed, "ppo"))
    ac = ActorCritic.create(fe.dim(env_config.width), config.hidden, rng)
    opt = nc.AdamState.init(ac.all_params(), lr=config.lr)
    E = config.n_envs
    steps = config.rollout_length // E
    ep_counter = 0

    def next_seeds(k):
        nonlocal ep_counter
        out = [child_seed(seed, "episode", ep_counter + j) for j in range(k)]
        ep_counter += k
        return out

    env, obs = fl.reset_batch(env_config, next_seeds(E))
    feats = fe(obs)
    running = np.zeros(E)
    episode_returns: list[float] = []
    ts, curve = [], []
    done_steps = 0
    while done_steps < config.total_timesteps:
        buf_f = np.empty((steps, E, feats.shape[1]))
        buf_a = np.empty((steps, E), dtype=np.int64)
        buf_lp = np.empty((steps, E))
        buf_r = np.empty((steps, E))
        buf_d = np.empty((steps, E))
        buf_v = np.empty((steps, E))
        new_eps: list[float] = []
        for t in range(steps):
            probs = ac.action_probs(feats)
            actions = sample_actions(probs, rng)
            buf_f[t] = feats
            buf_a[t] = actions
            buf_lp[t] = np.log(probs[np.arange(E), actions] + 1e-300)
            buf_v[t] = ac.values(feats)
            obs, rew, done = fl.step_batch(env, actions)
            running += rew
            buf_r[t] = rew
            buf_d[t] = done
            if done.any():
                new_eps.extend(running[done].tolist())
                running[done] = 0.0
                fl.reset_envs(env, done, next_seeds(int(done.sum())))
                obs = fl.render_raycast(env)
            feats = fe(obs)
        done_steps += steps * E
        adv, ret = compute_gae(buf_r, buf_v, buf_d, ac.values(feats), config.gamma, config.gae_lambda)
        n = steps * E
        batch = Batch(buf_f.reshape(n, -1), buf_a.reshape(n), buf_lp.reshape(n), adv.reshape(n), ret.reshape(n))
        stats = ppo_update(ac, batch, config, opt, rng)
        episode_returns.extend(new_eps)
        if new_eps:
            ts.append(done_steps)
            curve.append(float(np.mean(new_eps)))
            logger.debug("t=%d return=%.2f entropy=%.3f", done_steps, curve[-1], stats["entropy"])
    return ac, RewardCurve(np.asarray(ts), np.asarray(curve), episode_returns, config.final_points)


def random_baseline(env_config: fl.WorldConfig, n_episodes: int = 64, seed: int = 0) -> float:
    """Mean return of the uniform-random policy."""
    rng = np.random.default_rng(child_seed(seed, "random-baseline"))
    seeds = [child_seed(seed, "random-episode", i) for i in range(n_episodes)]
    _, returns = fl.rollout_random(env_config, seeds, rng, keep_obs=False)
    return float(np.mean(returns))


@dataclass
class CellResult:
    extractor: str
    task: str
    curves: list[RewardCurve]

    @property
    def finals(self) -> np.ndarray:
        return np.array([c.final for c in self.curves])

    @property
    def mean(self) -> float:
        return float(np.mean(self.finals))

    @property
    def stderr(self) -> float:
        f = self.finals
        return float(np.std(f, ddof=1) / np.sqrt(len(f))) if len(f) > 1 else 0.0


def evaluate_matrix(extractors: dict[str, FeatureExtractor], tasks: dict[str, fl.WorldConfig],
                    config: PpoConfig, seeds=None, out_dir=None) -> dict[tuple[str, str], CellResult]:
    """Train a policy per (extractor, task, seed); write curves and ``rl_table.csv``."""
    seeds = list(seeds) if seeds is not None else list(range(config.n_seeds))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = {}
    for ename, fe in extractors.items():
        for tname, task in tasks.items():
            curves = []
            for s in seeds:
                # the seed ignores the extractor: cells on one task share room layouts and
                # sampling streams, so extractor comparisons are paired
                _, curve = train_policy(task, fe, config, child_seed(s, tname))
                curves.append(curve)
                if out is not None:
                    curve.write_csv(out / f"curve_{ename}-{tname}_{s}.csv")
                logger.info("%s / %s seed %s: final %.2f", ename, tname, s, curve.final)
            results[(ename, tname)] = CellResult(ename, tname, curves)
    if out is not None:
        metrics.write_rows(out / "rl_table.csv", metrics.RL_TABLE_HEADER,
                           [(r.extractor, r.task, r.mean, r.stderr) for r in results.values()])
    return results
