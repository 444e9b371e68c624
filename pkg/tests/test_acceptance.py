"""End-to-end acceptance runs at desk scale.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line
per criterion in the terminal summary. The session fixtures are shared, so the
whole module takes on the order of an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from contsrl import detector as det
from contsrl import numcore as nc
from contsrl import replay
from contsrl import rlpolicy as rl
from contsrl import vae
from contsrl.harness import config, experiments
from contsrl.harness.ledger import IoLedger

MASTER_SEED = 0


def crit(n, title):
    return pytest.mark.criterion(n, title)


@pytest.fixture(scope="module")
def desk():
    return experiments.with_seed(config.preset("desk"), MASTER_SEED)


@pytest.fixture(scope="module")
def run_a(desk, tmp_path_factory):
    """[env1, env2] session plus detection accuracy from the stage-0 model."""
    return experiments.run_desk(desk, tmp_path_factory.mktemp("session_a"), with_rl=False)


@pytest.fixture(scope="module")
def run_b(desk, tmp_path_factory):
    """Same protocol with environment 3 in place of environment 2."""
    from dataclasses import replace
    exp = replace(desk, environments=(1, 3))
    return experiments.run_desk(exp, tmp_path_factory.mktemp("session_b"), with_rl=False)


# ---------------------------------------------------------------------------
# 1-3: numerical checks


@crit(1, "reverse-mode gradients match central differences (VAE and PPO losses)")
def test_gradient_correctness(record_property):
    t0 = time.process_time()
    errors = []
    for case in range(60):
        rng = np.random.default_rng(1000 + case)
        p = vae.init_params(vae.TINY, rng)
        p.batches_seen = int(rng.integers(0, 5000))
        x = rng.random((int(rng.integers(1, 4)), 8, 3))
        scale = float(rng.choice([1.0, 24.0]))
        seed = int(rng.integers(0, 2 ** 31))

        def f(p=p, x=x, scale=scale, seed=seed):
            total, _ = vae.loss_tensor(p, x, np.random.default_rng(seed), scale)
            return total

        errors.append(nc.grad_check(f, p.tensors, max_coords=40, rng=rng))
    for case in range(60):
        rng = np.random.default_rng(2000 + case)
        obs_dim = int(rng.integers(2, 9))
        ac = rl.ActorCritic.create(obs_dim, (int(rng.integers(3, 9)),) * int(rng.integers(1, 3)), rng)
        n = int(rng.integers(4, 24))
        feats = rng.normal(size=(n, obs_dim))
        actions = rng.integers(0, 3, n)
        # old policy a perturbed copy of the current one so ratios straddle the clip range
        old = np.log(ac.action_probs(feats)[np.arange(n), actions]) + rng.normal(scale=0.3, size=n)
        batch = rl.Batch(feats, actions, old, rng.normal(size=n), rng.normal(size=n))
        cfg = rl.PpoConfig(clip_epsilon=float(rng.uniform(0.1, 0.3)))
        errors.append(nc.grad_check(lambda: rl.ppo_loss(ac, batch, cfg)[0], ac.all_params(), max_coords=60, rng=rng))
    worst = max(errors)
    elapsed = time.process_time() - t0
    record_property("detail", f"{len(errors)} cases, max rel err {worst:.2e}, {elapsed:.0f} CPU s")
    assert len(errors) >= 100
    assert worst <= 1e-4
    assert elapsed < 60


def student_density(x, nu):
    logc = math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi)
    return math.exp(logc - (nu + 1) / 2 * math.log1p(x * x / nu))


@crit(2, "Student-t p-values match adaptive quadrature to 1e-8")
def test_student_t_accuracy(record_property):
    worst = 0.0
    for nu in (1, 5, 10, 18, 50):
        for t in np.linspace(0.0, 12.0, 49):
            # the tail in two pieces keeps quad's error estimate honest near the peak
            head, _ = integrate.quad(student_density, t, t + 20.0, args=(nu,), epsabs=1e-14, epsrel=1e-13, limit=200)
            tail, _ = integrate.quad(student_density, t + 20.0, np.inf, args=(nu,), epsabs=1e-14, epsrel=1e-13,
                                     limit=200)
            oracle = min(1.0, 2.0 * (head + tail))
            worst = max(worst, abs(det.student_t_p_value(t, nu) - oracle))
    record_property("detail", f"max abs err {worst:.1e} over 245 grid points")
    assert worst <= 1e-8


@crit(3, "Welch test rejects at the nominal rate under the null")
def test_welch_calibration(record_property):
    rng = np.random.default_rng(12345)
    trials, alpha = 10_000, 0.01
    a = rng.normal(size=(trials, 10))
    b = rng.normal(size=(trials, 10))
    rejects = sum(det.detect_change(det.ReconErrorBatch(x), det.ReconErrorBatch(y), alpha).changed
                  for x, y in zip(a, b))
    rate = rejects / trials
    record_property("detail", f"rejection rate {rate:.4f} over {trials} trials")
    assert 0.005 <= rate <= 0.02


# ---------------------------------------------------------------------------
# 4-6, 8, 9: continual session


def check_detection(res, env_b, record_property):
    trials = res.accuracy[(1, env_b)]
    rates = {a: trials.rates(a) for a in experiments.ALPHAS}
    tpr, fpr = rates[0.01]
    (detection,) = res.report.detections
    record_property("detail", f"v1 vs v{env_b}: tpr={tpr:.3f} fpr={fpr:.3f} at 0.01 over {len(trials.p_diff)} "
                    f"trials; tpr over alphas {[round(r[0], 3) for r in rates.values()]}; "
                    f"session p={detection.result.p_value:.2g}; {res.seconds['detection']:.0f} CPU s")
    assert len(trials.p_diff) >= 200
    assert tpr >= 0.95
    assert fpr <= 0.05
    # the verdict on well separated batches does not depend on where alpha sits in [1e-4, 0.05]
    for a, (t, _) in rates.items():
        assert t >= 0.95, a
    assert detection.result.p_value < min(experiments.ALPHAS)


def check_forgetting(res, env_b, record_property):
    mse = res.report.mse
    b = f"v{env_b}"
    rep1, ft1 = mse[("stage1-replay", "v1")], mse[("stage1-finetune", "v1")]
    rep2, ft2 = mse[("stage1-replay", b)], mse[("stage1-finetune", b)]
    record_property("detail", f"v1: replay {rep1:.2e} vs finetune {ft1:.2e} (ratio {rep1 / ft1:.2f}); "
                    f"{b}: replay {rep2:.2e} vs finetune {ft2:.2e}; session {res.seconds['session']:.0f} CPU s")
    assert res.report.stages == ["stage0", "stage1-replay", "stage1-finetune"]
    assert rep1 <= 0.5 * ft1
    assert rep2 <= 2.0 * ft2


@crit(4, "change detection accuracy at desk scale (env1 vs env2)")
def test_change_detection(run_a, record_property):
    check_detection(run_a, 2, record_property)
    assert run_a.seconds["detection"] < 15 * 60


@crit(5, "generative replay forgets less than fine-tuning (env1 -> env2)")
def test_forgetting_ordering(run_a, record_property):
    check_forgetting(run_a, 2, record_property)
    assert run_a.seconds["session"] < 30 * 60


@crit(6, "no past-data reads during replay; constant parameter count")
def test_no_past_data_and_bounded_size(run_a, record_property):
    rep = run_a.report
    ledger = IoLedger.load(rep.out_dir / "io_ledger.csv")
    replay_reads = ledger.reads("stage1-replay")
    past = str(rep.train_datasets["stage0"])
    counts = set(rep.param_counts.values())
    record_property("detail", f"replay-stage reads {replay_reads}; parameter counts {sorted(counts)}")
    assert past not in replay_reads
    assert replay_reads == [str(rep.train_datasets["stage1-replay"])]
    assert counts == {vae.init_params().n_params()}


@crit(8, "environment-3 replication of criteria 4 and 5")
def test_environment_three(run_b, record_property):
    check_detection(run_b, 3, record_property)
    check_forgetting(run_b, 3, record_property)


@crit(9, "same master seed gives bit-identical session CSVs")
def test_determinism(run_a, desk, tmp_path_factory, record_property):
    out = tmp_path_factory.mktemp("session_a_again")
    replay.continual_session(desk.env_sequence(), desk.session, out)
    same = {name: (run_a.report.out_dir / name).read_bytes() == (out / name).read_bytes()
            for name in ("mse_matrix.csv", "detections.csv")}
    record_property("detail", ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert all(same.values())


# ---------------------------------------------------------------------------
# 7: RL


def rl_verdicts(cells, baselines):
    finals = {k: c.finals for k, c in cells.items()}
    a = all(np.all(f >= 3.0 * baselines[t]) for (_, t), f in finals.items())
    b = cells[("replay", "task1")].mean >= cells[("finetune", "task1")].mean
    c = cells[("replay", "task2")].mean >= cells[("raw", "task2")].mean
    return a, b, c


def rl_summary(cells, baselines, verdicts):
    parts = [f"{e}/{t} {c.mean:.1f}+-{c.stderr:.1f}" for (e, t), c in sorted(cells.items())]
    lowest = min(float(np.min(c.finals)) / baselines[t] for (_, t), c in cells.items())
    return (", ".join(parts) + f"; worst final / random {lowest:.2f}; "
            + " ".join(f"({k}){'ok' if v else 'FAIL'}" for k, v in zip("abc", verdicts)))


@crit(7, "PPO beats random; replay features transfer best")
def test_rl_transfer(run_a, desk, tmp_path_factory, record_property):
    baselines = {t: rl.random_baseline(env, 64, seed=MASTER_SEED) for t, env in experiments.task_envs(desk).items()}
    attempts = []
    # flagged stochastic: one rerun with a fresh master seed before calling it a regression
    for master in (MASTER_SEED, MASTER_SEED + 1):
        cells = experiments.run_rl_matrix(desk, run_a.report, tmp_path_factory.mktemp(f"rl_{master}"), master)
        verdicts = rl_verdicts(cells, baselines)
        attempts.append(f"seed {master}: " + rl_summary(cells, baselines, verdicts))
        if all(verdicts):
            break
    record_property("detail", " | ".join(attempts))
    assert desk.rl_seeds == 3 and desk.ppo.total_timesteps == 150_000
    assert all(verdicts)
