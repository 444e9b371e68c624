import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from contsrl import detector as det
from contsrl import flatland as fl
from contsrl import vae


def student_density(x, nu):
    logc = math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi)
    return math.exp(logc - (nu + 1) / 2 * math.log1p(x * x / nu))


def quad_p_value(t, nu):
    """Two-sided tail by adaptive quadrature of the density."""
    tail, _ = integrate.quad(student_density, abs(t), np.inf, args=(nu,), epsabs=1e-14, epsrel=1e-12, limit=200)
    return 2 * tail


def batch_with(mean, std, n=10):
    # values with exactly the requested sample mean and sample std
    base = np.linspace(-1, 1, n)
    base = (base - base.mean()) / base.std(ddof=1)
    return det.ReconErrorBatch(mean + std * base)


def test_identical_batches_t_zero_not_changed():
    b = batch_with(0.3, 0.05)
    t, nu = det.welch_statistic(b, b)
    assert t == 0.0
    res = det.detect_change(b, b)
    assert res.p_value == 1.0 and not res.changed


def test_hand_evaluated_statistic():
    t, nu = det.welch_statistic(batch_with(1.0, 0.1), batch_with(0.5, 0.1))
    assert t == pytest.approx(0.5 / math.sqrt(0.02 / 10), rel=1e-12)
    assert t == pytest.approx(11.1803, abs=1e-4)
    assert nu == pytest.approx(18.0, rel=1e-12)


def test_hand_case_rejects_at_all_alphas():
    b1, b2 = batch_with(1.0, 0.1), batch_with(0.5, 0.1)
    for alpha in (0.05, 0.01, 0.001, 0.0001):
        res = det.detect_change(b1, b2, alpha)
        assert res.changed
        assert res.p_value < 1e-8


def test_degenerate_and_bad_inputs():
    flat = det.ReconErrorBatch(np.full(10, 0.2))
    with pytest.raises(det.DegenerateBatches):
        det.welch_statistic(flat, flat)
    with pytest.raises(ValueError):
        det.welch_statistic(batch_with(0, 1, 10), batch_with(0, 1, 8))
    with pytest.raises(ValueError):
        det.detect_change(flat, batch_with(0, 1), alpha=1.0)
    with pytest.raises(ValueError):
        det.student_t_p_value(1.0, 0.0)
    with pytest.raises(ValueError):
        det.ReconErrorBatch(np.array([1.0]))


def test_batch_stats():
    b = det.ReconErrorBatch([1.0, 2.0, 3.0, 4.0])
    assert b.mean == 2.5
    assert b.std == pytest.approx(np.sqrt(5 / 3))
    assert b.n == 4


def test_p_value_known_points():
    assert det.student_t_p_value(0.0, 18) == 1.0
    assert det.student_t_p_value(2.101, 18) == pytest.approx(0.05, abs=5e-4)
    assert det.student_t_p_value(11.18, 18) < 1e-8
    # nu = 1 is Cauchy: P(|T| > t) = 1 - 2 atan(t) / pi
    for t in (0.3, 1.0, 7.0):
        assert det.student_t_p_value(t, 1) == pytest.approx(1 - 2 * math.atan(t) / math.pi, abs=1e-12)


@pytest.mark.parametrize("nu", [1, 2.5, 5, 10, 18, 50])
def test_p_value_against_quadrature(nu):
    for t in np.linspace(0, 12, 25):
        assert abs(det.student_t_p_value(t, nu) - quad_p_value(t, nu)) <= 1e-8


@settings(max_examples=60, deadline=None)
@given(st.floats(0.2, 200), st.lists(st.floats(0, 30), min_size=2, max_size=8))
def test_p_value_monotone_in_abs_t(nu, ts):
    ts = sorted(ts)
    ps = [det.student_t_p_value(t, nu) for t in ts]
    assert all(0 <= p <= 1 for p in ps)
    assert all(a >= b - 1e-15 for a, b in zip(ps, ps[1:]))
    assert det.student_t_p_value(-ts[-1], nu) == ps[-1]


def test_betainc_against_closed_forms():
    # I_x(1, b) = 1 - (1-x)^b and I_x(a, 1) = x^a
    for x in (0.01, 0.3, 0.7, 0.99):
        assert det.betainc(1.0, 3.5, x) == pytest.approx(1 - (1 - x) ** 3.5, abs=1e-10)
        assert det.betainc(2.5, 1.0, x) == pytest.approx(x ** 2.5, abs=1e-10)
    assert det.betainc(2.0, 3.0, 0.0) == 0.0 and det.betainc(2.0, 3.0, 1.0) == 1.0


values = st.lists(st.floats(-100, 100, allow_nan=False), min_size=10, max_size=10)


def _spread(v):
    return np.std(v, ddof=1) > 1e-6


@settings(max_examples=100, deadline=None)
@given(values, values)
def test_antisymmetry(v1, v2):
    if not (_spread(v1) or _spread(v2)):
        return
    b1, b2 = det.ReconErrorBatch(v1), det.ReconErrorBatch(v2)
    t12, nu12 = det.welch_statistic(b1, b2)
    t21, nu21 = det.welch_statistic(b2, b1)
    assert t12 == pytest.approx(-t21, rel=1e-12, abs=1e-12)
    assert nu12 == pytest.approx(nu21, rel=1e-12)
    assert det.student_t_p_value(t12, nu12) == pytest.approx(det.student_t_p_value(t21, nu21), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(values, values, st.floats(-50, 50), st.floats(0.01, 100))
def test_shift_and_scale_invariance(v1, v2, shift, scale):
    if not (_spread(v1) and _spread(v2)):
        return
    b1, b2 = det.ReconErrorBatch(v1), det.ReconErrorBatch(v2)
    t, nu = det.welch_statistic(b1, b2)
    ts, nus = det.welch_statistic(det.ReconErrorBatch(np.add(v1, shift)), det.ReconErrorBatch(np.add(v2, shift)))
    tc, nuc = det.welch_statistic(det.ReconErrorBatch(np.multiply(v1, scale)),
                                  det.ReconErrorBatch(np.multiply(v2, scale)))
    assert ts == pytest.approx(t, rel=1e-6, abs=1e-6)
    assert nus == pytest.approx(nu, rel=1e-6)
    assert tc == pytest.approx(t, rel=1e-9, abs=1e-9)
    assert nuc == pytest.approx(nu, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(2, 30))
def test_nu_bounds(s1, s2, n):
    b1, b2 = batch_with(0.0, s1, n), batch_with(1.0, s2, n)
    _, nu = det.welch_statistic(b1, b2)
    assert n - 1 - 1e-9 <= nu <= 2 * (n - 1) + 1e-9
    if s1 == s2:
        assert nu == pytest.approx(2 * (n - 1))


def test_calibration_under_null():
    rng = np.random.default_rng(123)
    trials = 5000
    x = rng.normal(0.5, 0.1, size=(trials, 2, 10))
    rejections = sum(det.detect_change(det.ReconErrorBatch(a), det.ReconErrorBatch(b), 0.01).changed
                     for a, b in x)
    rate = rejections / trials
    assert 0.005 <= rate <= 0.015


def test_alpha_near_one_always_rejects():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 2, 10))
    p = np.array([det.detect_change(det.ReconErrorBatch(a), det.ReconErrorBatch(b)).p_value for a, b in x])
    _, fpr = det.AccuracyTrials(p_same=p, p_diff=p).rates(1.0)
    assert fpr == 1.0
    assert det.AccuracyTrials(p_same=p, p_diff=p).rates(0.01)[1] < 0.05


def test_read_batch_csv(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("error\n0.1\n0.2\n\n0.4\n")
    assert det.read_batch_csv(p).values.tolist() == [0.1, 0.2, 0.4]


@pytest.fixture(scope="module")
def tiny_model():
    cfg = vae.VaeConfig(conv_channels=(4, 4, 4), latent=4)
    return vae.init_params(cfg, np.random.default_rng(0))


def test_build_batch_shape_and_determinism(tiny_model):
    env = fl.variant(1, episode_len=30)
    kw = dict(n_groups=4, episodes_per_group=3, states_per_episode=5)
    a = det.build_batch(tiny_model, env, rng=np.random.default_rng(3), **kw)
    b = det.build_batch(tiny_model, env, rng=np.random.default_rng(3), **kw)
    assert a.n == 4
    np.testing.assert_array_equal(a.values, b.values)
    assert np.all(a.values > 0)
    assert det.build_batch(tiny_model, env, rng=np.random.default_rng(1)).n == 10
    with pytest.raises(ValueError):
        det.build_batch(tiny_model, env, n_groups=1)


def test_build_batch_full_episode_matches_direct_errors(tiny_model):
    env = fl.variant(2, episode_len=12)
    rng = np.random.default_rng(8)
    batch = det.build_batch(tiny_model, env, n_groups=2, episodes_per_group=2, rng=rng)
    # replay the same draws by hand
    rng = np.random.default_rng(8)
    seeds = rng.integers(0, 2 ** 62, size=4)
    env_s, obs = fl.reset_batch(env, seeds)
    frames = []
    for _ in range(env.episode_len):
        frames.append(obs)
        obs, _, _ = fl.step_batch(env_s, rng.integers(0, 3, size=4))
    frames = np.stack(frames, axis=1)  # [4, T, W, 3]
    errs = vae.recon_errors(tiny_model, frames.reshape(-1, 64, 3)).reshape(4, -1).mean(axis=1)
    np.testing.assert_allclose(batch.values, [errs[:2].mean(), errs[2:].mean()], rtol=1e-12)
