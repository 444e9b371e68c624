"""Convolutional VAE over 1-D colour images, with inverse KL annealing."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Tensor

ANNEAL = 0.9995
EVAL_CHUNK = 1024


@dataclass(frozen=True)
class VaeConfig:
    width: int = 64
    channels: int = 3
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 4
    stride: int = 2
    latent: int = 64
    anneal: float = ANNEAL

    def encoder_lengths(self) -> list[int]:
        lengths = [self.width]
        for _ in self.conv_channels:
            lengths.append(nc.conv1d_output_length(lengths[-1], self.kernel, self.stride))
        if lengths[-1] < 1:
            raise ValueError(f"width {self.width} too small for {len(self.conv_channels)} conv layers")
        return lengths

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[-1] * self.encoder_lengths()[-1]


TINY = VaeConfig(width=8, conv_channels=(2, 2, 2), kernel=2, stride=1, latent=4)


def kl_weight_schedule(batches_seen: int, anneal: float = ANNEAL) -> float:
    if batches_seen < 0:
        raise ValueError("batches_seen must be >= 0")
    return anneal ** batches_seen


@dataclass
class VaeParams:
    config: VaeConfig
    tensors: dict[str, Tensor]
    batches_seen: int = 0
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def kl_weight(self) -> float:
        return kl_weight_schedule(self.batches_seen, self.config.anneal)

    def n_params(self) -> int:
        return nc.param_count(self.tensors)

    def copy(self) -> "VaeParams":
        return VaeParams(self.config, {k: Tensor(t.data.copy(), t.requires_grad, k) for k, t in self.tensors.items()},
                         self.batches_seen, dict(self.meta))


@dataclass
class LossBreakdown:
    total: float
    recon: float
    kl: float
    kl_weight: float


def init_params(config: VaeConfig = VaeConfig(), rng: np.random.Generator | None = None) -> VaeParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    K = config.kernel
    chans = (config.channels, *config.conv_channels)
    t: dict[str, np.ndarray] = {}
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        t[f"enc{i}_w"] = nc.glorot(rng, (cout, cin, K), cin * K, cout * K)
        t[f"enc{i}_b"] = np.zeros(cout)
    F, D = config.flat_dim, config.latent
    t["enc_fc_w"] = nc.glorot(rng, (F, 2 * D), F, 2 * D)
    t["enc_fc_b"] = np.zeros(2 * D)
    t["dec_fc_w"] = nc.glorot(rng, (D, F), D, F)
    t["dec_fc_b"] = np.zeros(F)
    rev = chans[::-1]
    for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
        t[f"dec{i}_w"] = nc.glorot(rng, (cin, cout, K), cin * K, cout * K)
        t[f"dec{i}_b"] = np.zeros(cout)
    return VaeParams(config, {k: Tensor(v, name=k) for k, v in t.items()})


def _as_input(x) -> Tensor:
    """[B, W, C] images -> channel-first tensor [B, C, W]."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    if data.ndim == 2:
        data = data[None]
    if isinstance(x, Tensor) and x.requires_grad:
        return nc.transpose(x, (0, 2, 1))
    return Tensor(np.ascontiguousarray(data.transpose(0, 2, 1)))


def encode(params: VaeParams, x) -> tuple[Tensor, Tensor]:
    """Posterior mean and log-variance, each [B, latent]."""
    cfg, p = params.config, params.tensors
    h = _as_input(x)
    if not np.all(np.isfinite(h.data)):
        raise FloatingPointError("encoder input contains non-finite values")
    for i in range(len(cfg.conv_channels)):
        h = nc.relu(nc.conv1d_forward(h, p[f"enc{i}_w"], p[f"enc{i}_b"], cfg.stride))
    h = nc.reshape(h, (h.shape[0], cfg.flat_dim))
    out = nc.dense_forward(h, p["enc_fc_w"], p["enc_fc_b"])
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("encoder produced non-finite activations")
    D = cfg.latent
    return out[:, :D], out[:, D:]


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    if mu.shape != logvar.shape:
        raise nc.ShapeError("reparameterize", mu.shape, logvar.shape)
    eps = rng.standard_normal(mu.shape)
    return nc.add(mu, nc.mul(nc.exp(nc.mul(logvar, 0.5)), eps))


def decode(params: VaeParams, z) -> Tensor:
    """Latent batch -> reconstructed images [B, W, C] in (0, 1)."""
    cfg, p = params.config, params.tensors
    z = nc.as_tensor(z)
    lengths = cfg.encoder_lengths()
    h = nc.relu(nc.dense_forward(z, p["dec_fc_w"], p["dec_fc_b"]))
    h = nc.reshape(h, (z.shape[0], cfg.conv_channels[-1], lengths[-1]))
    n = len(cfg.conv_channels)
    for i in range(n):
        L_in, L_out = lengths[n - i], lengths[n - i - 1]
        pad = L_out - nc.conv_transpose1d_output_length(L_in, cfg.kernel, cfg.stride)
        h = nc.conv_transpose1d_forward(h, p[f"dec{i}_w"], p[f"dec{i}_b"], cfg.stride, pad)
        h = nc.relu(h) if i < n - 1 else nc.sigmoid(h)
    return nc.transpose(h, (0, 2, 1))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over the batch of KL(N(mu, exp(logvar)) || N(0, I))."""
    per = nc.sub(nc.add(nc.exp(logvar), nc.square(mu)), nc.add(logvar, 1.0))
    return nc.mul(nc.sum(per), 0.5 / mu.shape[0])


def loss_tensor(params: VaeParams, x, rng: np.random.Generator,
                recon_scale: float = 1.0) -> tuple[Tensor, LossBreakdown]:
    x_data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    if x_data.shape[0] == 0:
        raise ValueError("empty batch")
    mu, logvar = encode(params, x)
    recon_x = decode(params, reparameterize(mu, logvar, rng))
    recon = nc.mean(nc.square(nc.sub(recon_x, x if isinstance(x, Tensor) else Tensor(x_data))))
    kl = kl_divergence(mu, logvar)
    w = params.kl_weight
    total = nc.add(nc.mul(recon, recon_scale), nc.mul(kl, w))
    return total, LossBreakdown(total.item(), recon.item(), kl.item(), w)


def loss(params: VaeParams, x, rng: np.random.Generator) -> LossBreakdown:
    return loss_tensor(params, x, rng)[1]


def sample_prior(params: VaeParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` generated states from z ~ N(0, I); decoder means, no output noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.standard_normal((n, params.config.latent))
    out = np.empty((n, params.config.width, params.config.channels))
    for s in range(0, n, EVAL_CHUNK):
        out[s:s + EVAL_CHUNK] = decode(params, z[s:s + EVAL_CHUNK]).data
    return out


def encode_mean(params: VaeParams, states: np.ndarray) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    out = np.empty((states.shape[0], params.config.latent))
    for s in range(0, states.shape[0], EVAL_CHUNK):
        out[s:s + EVAL_CHUNK] = encode(params, states[s:s + EVAL_CHUNK])[0].data
    return out


def reconstruct(params: VaeParams, states: np.ndarray) -> np.ndarray:
    """Deterministic reconstruction through the posterior mean."""
    states = np.asarray(states, dtype=float)
    out = np.empty_like(states)
    for s in range(0, states.shape[0], EVAL_CHUNK):
        mu, _ = encode(params, states[s:s + EVAL_CHUNK])
        out[s:s + EVAL_CHUNK] = decode(params, mu).data
    return out


def recon_errors(params: VaeParams, states: np.ndarray) -> np.ndarray:
    """Per-state mean squared error over all pixels and channels."""
    states = np.asarray(states, dtype=float)
    return np.mean((reconstruct(params, states) - states) ** 2, axis=(1, 2))


def recon_mse(params: VaeParams, dataset: np.ndarray, n_samples: int) -> float:
    """Mean per-pixel squared error over the first ``n_samples`` states, z = mu."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if n_samples > len(dataset):
        raise ValueError(f"n_samples={n_samples} exceeds dataset size {len(dataset)}")
    return float(np.mean(recon_errors(params, dataset[:n_samples])))


# ---------------------------------------------------------------------------
# checkpoints: tensor file in RSRL format + plain-text sidecar


def save_checkpoint(params: VaeParams, path: str | Path, **meta) -> None:
    path = Path(path)
    names = list(params.tensors)
    nc.save_tensors(path, [params.tensors[k].data for k in names])
    info = {**params.meta, **{k: str(v) for k, v in meta.items()}}
    cfg = asdict(params.config)
    lines = [f"names = {','.join(names)}",
             f"batches_seen = {params.batches_seen}",
             f"kl_weight = {params.kl_weight!r}"]
    lines += [f"config.{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in cfg.items()]
    lines += [f"meta.{k} = {v}" for k, v in info.items()]
    _sidecar(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> VaeParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    kv = {}
    for line in _sidecar(path).read_text().splitlines():
        if "=" in line:
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    cfg_kw = {}
    for f, default in asdict(VaeConfig()).items():
        raw = kv[f"config.{f}"]
        if isinstance(default, tuple):
            cfg_kw[f] = tuple(int(c) for c in raw.split(","))
        else:
            cfg_kw[f] = type(default)(raw)
    arrays = nc.load_tensors(path)
    names = kv["names"].split(",")
    if len(arrays) != len(names):
        raise ValueError(f"{path}: {len(arrays)} tensors but {len(names)} names")
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return VaeParams(VaeConfig(**cfg_kw), {k: Tensor(a, name=k) for k, a in zip(names, arrays)},
                     int(kv["batches_seen"]), meta)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta")
