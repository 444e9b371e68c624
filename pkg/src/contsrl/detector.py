"""Environment-change detection with Welch's t-test on VAE reconstruction errors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import flatland as fl
from . import vae as vae_mod

LENTZ_TOL = 1e-10
LENTZ_MAX_ITER = 500
TINY = 1e-300


class DegenerateBatches(ValueError):
    """Both batches have zero spread; the statistic is undefined."""


@dataclass(frozen=True)
class ReconErrorBatch:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("a batch needs at least two values")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1))


@dataclass(frozen=True)
class WelchResult:
    t: float
    nu: float
    p_value: float
    changed: bool


def welch_statistic(b1: ReconErrorBatch, b2: ReconErrorBatch) -> tuple[float, float]:
    """t and Welch-Satterthwaite degrees of freedom for two equal-size batches."""
    if b1.n != b2.n:
        raise ValueError(f"batches must have equal size, got {b1.n} and {b2.n}")
    n = b1.n
    v1, v2 = b1.std ** 2, b2.std ** 2
    if v1 == 0.0 and v2 == 0.0:
        raise DegenerateBatches("both batches have zero variance")
    t = (b1.mean - b2.mean) / math.sqrt((v1 + v2) / n)
    nu = (n - 1) * (v1 + v2) ** 2 / (v1 ** 2 + v2 ** 2)
    return t, nu


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > TINY else TINY)
    h = d
    for m in range(1, LENTZ_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > TINY else TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > TINY else TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > TINY else TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > TINY else TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < LENTZ_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_p_value(t: float, nu: float) -> float:
    """Two-sided P(|T| >= |t|) for T ~ Student(nu)."""
    if nu <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0:
        return 1.0
    return min(1.0, max(0.0, betainc(nu / 2.0, 0.5, nu / (nu + t * t))))


def detect_change(b1: ReconErrorBatch, b2: ReconErrorBatch, alpha: float = 0.01) -> WelchResult:
    """Declare a change when the two-sided p-value falls below ``alpha``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    t, nu = welch_statistic(b1, b2)
    p = student_t_p_value(t, nu)
    return WelchResult(t, nu, p, p < alpha)


# ---------------------------------------------------------------------------
# batches from a trained VAE


def build_batch(vae_params, env_config: fl.WorldConfig, n_groups: int = 10, episodes_per_group: int = 20,
                rng: np.random.Generator | None = None, states_per_episode: int | None = None) -> ReconErrorBatch:
    """Mean reconstruction error of random-policy states, one value per group of episodes.

    ``states_per_episode`` draws that many timesteps uniformly from each
    episode; None uses every state.
    """
    if n_groups < 2:
        raise ValueError("n_groups must be >= 2")
    rng = rng if rng is not None else np.random.default_rng()
    n_eps = n_groups * episodes_per_group
    T = env_config.episode_len
    seeds = rng.integers(0, 2 ** 62, size=n_eps)
    if states_per_episode is None or states_per_episode >= T:
        take = np.ones((n_eps, T), dtype=bool)
    else:
        take = np.zeros((n_eps, T), dtype=bool)
        cols = np.argsort(rng.random((n_eps, T)), axis=1)[:, :states_per_episode]
        np.put_along_axis(take, cols, True, axis=1)
    env, _ = fl.reset_batch(env_config, seeds)
    counts = take.sum(axis=1)
    frames = np.empty((int(counts.sum()), env_config.width, 3))
    owner = np.repeat(np.arange(n_eps), counts)
    # frames are stored episode-major: slot offsets per episode
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    filled = np.zeros(n_eps, dtype=np.int64)
    for t in range(T):
        idx = np.flatnonzero(take[:, t])
        if idx.size:
            frames[offsets[idx] + filled[idx]] = fl.render_raycast(env, idx)
            filled[idx] += 1
        fl.step_batch(env, rng.integers(0, fl.N_ACTIONS, size=n_eps), render=False)
    errs = vae_mod.recon_errors(vae_params, frames)
    per_episode_sum = np.bincount(owner, weights=errs, minlength=n_eps)
    group = np.repeat(np.arange(n_groups), episodes_per_group)
    values = np.bincount(group, weights=per_episode_sum) / np.bincount(group, weights=counts)
    return ReconErrorBatch(values)


@dataclass
class AccuracyTrials:
    p_same: np.ndarray
    p_diff: np.ndarray

    def rates(self, alpha: float) -> tuple[float, float]:
        """(true positive rate, false positive rate) at ``alpha``."""
        return float(np.mean(self.p_diff < alpha)), float(np.mean(self.p_same < alpha))


def accuracy_trials(vae_params, env_a: fl.WorldConfig, env_b: fl.WorldConfig, n_trials: int,
                    rng: np.random.Generator, **batch_kw) -> AccuracyTrials:
    """Per trial: a reference batch on ``env_a`` compared against a fresh
    ``env_a`` batch and a fresh ``env_b`` batch."""
    p_same, p_diff = np.empty(n_trials), np.empty(n_trials)
    for i in range(n_trials):
        ref = build_batch(vae_params, env_a, rng=rng, **batch_kw)
        same = build_batch(vae_params, env_a, rng=rng, **batch_kw)
        diff = build_batch(vae_params, env_b, rng=rng, **batch_kw)
        p_same[i] = student_t_p_value(*welch_statistic(ref, same))
        p_diff[i] = student_t_p_value(*welch_statistic(ref, diff))
    return AccuracyTrials(p_same, p_diff)


def accuracy_experiment(vae_params, env_a, env_b, n_trials: int, alpha: float = 0.01,
                        rng: np.random.Generator | None = None, **batch_kw) -> tuple[float, float]:
    rng = rng if rng is not None else np.random.default_rng()
    return accuracy_trials(vae_params, env_a, env_b, n_trials, rng, **batch_kw).rates(alpha)


def read_batch_csv(path) -> ReconErrorBatch:
    vals = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(float(line.split(",")[0]))
            except ValueError:
                if vals:
                    raise
                # tolerate a header row
    return ReconErrorBatch(np.asarray(vals))
