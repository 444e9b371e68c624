import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contsrl import numcore as nc
from contsrl import vae
from contsrl.numcore import Tensor


@pytest.fixture(scope="module")
def params():
    return vae.init_params(vae.VaeConfig(), np.random.default_rng(0))


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 64, 3))


def test_default_architecture(params):
    cfg = params.config
    assert cfg.encoder_lengths() == [64, 31, 14, 6]
    assert cfg.flat_dim == 384
    assert params.n_params() == 95_267
    assert params.tensors["enc_fc_w"].shape == (384, 128)
    assert params.tensors["dec2_w"].shape == (16, 3, 4)


def test_encode_shapes_determinism_and_zero_input(params):
    x = images(5)
    mu, logvar = vae.encode(params, x)
    assert mu.shape == logvar.shape == (5, 64)
    mu2, logvar2 = vae.encode(params, x.copy())
    assert np.array_equal(mu.data, mu2.data) and np.array_equal(logvar.data, logvar2.data)
    mu0, lv0 = vae.encode(params, np.zeros((2, 64, 3)))
    assert np.all(np.isfinite(mu0.data)) and np.all(np.isfinite(lv0.data))


def test_encode_rejects_non_finite(params):
    x = images(2)
    x[0, 3, 1] = np.nan
    with pytest.raises(FloatingPointError):
        vae.encode(params, x)


def test_decode_range_and_shape(params):
    z = np.random.default_rng(1).normal(scale=20.0, size=(4, 64))
    out = vae.decode(params, z).data
    assert out.shape == (4, 64, 3)
    assert np.all((out > 0) & (out < 1))
    assert np.array_equal(out, vae.decode(params, z).data)


def test_reparameterize_zero_variance_and_seed():
    mu = Tensor(np.random.default_rng(0).normal(size=(3, 5)))
    z = vae.reparameterize(mu, Tensor(np.full((3, 5), -50.0)), np.random.default_rng(1))
    assert np.max(np.abs(z.data - mu.data)) < 1e-9
    lv = Tensor(np.zeros((3, 5)))
    a = vae.reparameterize(mu, lv, np.random.default_rng(7)).data
    b = vae.reparameterize(mu, lv, np.random.default_rng(7)).data
    assert np.array_equal(a, b)
    with pytest.raises(nc.ShapeError):
        vae.reparameterize(mu, Tensor(np.zeros((3, 4))), np.random.default_rng(0))


def test_reparameterize_monte_carlo_mean():
    n = 10_000
    mu = np.array([0.5, -1.0, 2.0])
    logvar = np.array([0.0, np.log(4.0), np.log(0.25)])
    z = vae.reparameterize(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(logvar, (n, 1))),
                           np.random.default_rng(3)).data
    sigma = np.exp(logvar / 2)
    assert np.all(np.abs(z.mean(axis=0) - mu) <= 3 * sigma / np.sqrt(n))
    np.testing.assert_allclose(z.std(axis=0), sigma, rtol=0.05)


def test_kl_closed_form_examples():
    zeros = Tensor(np.zeros((4, 64)))
    assert vae.kl_divergence(zeros, zeros).item() == 0.0
    mu = np.zeros((1, 64))
    mu[0, 0] = 1.0
    assert vae.kl_divergence(Tensor(mu), Tensor(np.zeros((1, 64)))).item() == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10.0))
def test_kl_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    mu = rng.normal(scale=scale, size=(3, 6))
    logvar = rng.normal(scale=scale, size=(3, 6))
    assert vae.kl_divergence(Tensor(mu), Tensor(logvar)).item() >= 0.0


def test_kl_weight_schedule():
    assert vae.kl_weight_schedule(0) == 1.0
    assert vae.kl_weight_schedule(1) == 0.9995
    assert vae.kl_weight_schedule(1386) == pytest.approx(0.5, abs=1e-3)
    w = [vae.kl_weight_schedule(n) for n in range(0, 20000, 97)]
    assert all(0 < a <= 1 for a in w)
    assert all(a >= b for a, b in zip(w, w[1:]))
    with pytest.raises(ValueError):
        vae.kl_weight_schedule(-1)


def test_loss_breakdown_consistency(params):
    p = params.copy()
    p.batches_seen = 500
    br = vae.loss(p, images(6), np.random.default_rng(0))
    assert br.kl_weight == pytest.approx(0.9995 ** 500)
    assert br.total == pytest.approx(br.recon + br.kl_weight * br.kl)
    assert br.kl >= 0 and br.recon > 0
    with pytest.raises(ValueError):
        vae.loss(p, np.zeros((0, 64, 3)), np.random.default_rng(0))


def test_perfect_reconstruction_has_zero_recon(params):
    # encoder pinned to a fixed code with vanishing variance; target = decode(code)
    p = params.copy()
    code = np.random.default_rng(5).normal(size=64)
    p.tensors["enc_fc_w"] = Tensor(np.zeros((384, 128)))
    p.tensors["enc_fc_b"] = Tensor(np.r_[code, np.full(64, -80.0)])
    target = vae.decode(p, code[None]).data
    br = vae.loss(p, np.repeat(target, 3, axis=0), np.random.default_rng(0))
    assert br.recon < 1e-20


def test_loss_gradient_matches_finite_differences():
    p = vae.init_params(vae.TINY, np.random.default_rng(2))
    x = np.random.default_rng(3).random((3, 8, 3))
    p.batches_seen = 200

    def f():
        return vae.loss_tensor(p, x, np.random.default_rng(11), recon_scale=24.0)[0]

    assert nc.grad_check(f, p.tensors, max_coords=60, rng=np.random.default_rng(0)) <= 1e-4


def test_sample_prior(params):
    s = vae.sample_prior(params, 5, np.random.default_rng(4))
    assert s.shape == (5, 64, 3)
    assert np.all((s > 0) & (s < 1))
    assert np.array_equal(s, vae.sample_prior(params, 5, np.random.default_rng(4)))
    with pytest.raises(ValueError):
        vae.sample_prior(params, 0, np.random.default_rng(0))


def test_recon_mse(params):
    data = images(20)
    m = vae.recon_mse(params, data, 10)
    assert np.isfinite(m) and m > 0
    assert m == vae.recon_mse(params, data, 10)
    assert m == pytest.approx(np.mean((vae.reconstruct(params, data[:10]) - data[:10]) ** 2))
    with pytest.raises(ValueError):
        vae.recon_mse(params, data, 21)
    with pytest.raises(ValueError):
        vae.recon_mse(params, data[:0], 1)


def test_reconstruct_uses_posterior_mean(params):
    x = images(3)
    mu, _ = vae.encode(params, x)
    np.testing.assert_array_equal(vae.reconstruct(params, x), vae.decode(params, mu).data)


def test_checkpoint_roundtrip(tmp_path, params):
    p = params.copy()
    p.batches_seen = 1234
    path = tmp_path / "m.ckpt"
    vae.save_checkpoint(p, path, variant=2)
    q = vae.load_checkpoint(path)
    assert q.config == p.config and q.batches_seen == 1234
    assert q.meta["variant"] == "2"
    for k in p.tensors:
        np.testing.assert_array_equal(q.tensors[k].data, p.tensors[k].data)
    text = (tmp_path / "m.ckpt.meta").read_text()
    assert "kl_weight" in text and "batches_seen = 1234" in text
    with pytest.raises(FileNotFoundError):
        vae.load_checkpoint(tmp_path / "missing.ckpt")


def test_tiny_config_roundtrip(tmp_path):
    p = vae.init_params(vae.TINY)
    vae.save_checkpoint(p, tmp_path / "t.ckpt")
    q = vae.load_checkpoint(tmp_path / "t.ckpt")
    assert q.config == vae.TINY
    x = images(2)[:, :8]
    np.testing.assert_array_equal(vae.reconstruct(p, x), vae.reconstruct(q, x))


def test_too_narrow_width_rejected():
    with pytest.raises(ValueError):
        vae.VaeConfig(width=8).encoder_lengths()
