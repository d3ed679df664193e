"""Double-encoder conditional VAE for 3D volume pairs.

The recognition encoder is a plain CNN over the stacked (base, target) pair.
The decoder is a U-net over the base volume alone; its downsampling branch is
the second "encoder".  Every non-image input (the scalar covariates, and in
the decoder also the latent sample) passes through a per-layer linear map
whose output is added channel-wise after group normalization, right before
the ReLU.

Checkpoints are ``.npz`` containers: every entry of ``state_dict()`` is stored
under its PyTorch name (e.g. ``encoder.blocks.0.0.conv.weight``,
``decoder.head.bias``), plus ``__config__`` (ModelConfig JSON) and optionally
``__standardizer__`` and ``__meta__`` (JSON strings).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import Standardizer, Volume

COND_DIM = 3  # (age_std, delta_t_std, status)


@dataclass
class ModelConfig:
    latent_dim: int = 10
    encoder_blocks: int = 4
    channels: tuple = (16, 32, 64, 64)
    groupnorm_groups: int = 4
    image_size: int = 80
    conditioning_dim: int = COND_DIM
    residual: bool = True
    kl_weight: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self) -> None:
        if self.latent_dim < 1 or self.encoder_blocks < 1:
            raise ValueError("latent_dim and encoder_blocks must be positive")
        if len(self.channels) != self.encoder_blocks:
            raise ValueError(
                f"need one channel count per block ({self.encoder_blocks}), got {self.channels}"
            )
        if self.image_size % (2**self.encoder_blocks):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2**{self.encoder_blocks}"
            )
        bad = [c for c in self.channels if c % self.groupnorm_groups]
        if bad:
            raise ValueError(f"groupnorm_groups={self.groupnorm_groups} must divide channels {bad}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")

    @property
    def bottom_size(self) -> int:
        return self.image_size // 2**self.encoder_blocks

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass
class LatentGaussian:
    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.logvar = np.asarray(self.logvar, dtype=np.float64)
        if self.mean.shape != self.logvar.shape:
            raise ValueError("mean and logvar shapes differ")


@dataclass
class ConditioningVector:
    age_std: float
    delta_t_std: float
    status: float

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([[self.age_std, self.delta_t_std, self.status]], dtype=dtype)


class ConvGN(nn.Module):
    """conv(k=3, s=1, p=1) -> GroupNorm -> + Linear(embedding) -> ReLU"""

    def __init__(self, cin: int, cout: int, groups: int, emb_dim: int):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel_size=3, stride=1, padding=1)
        self.norm = nn.GroupNorm(groups, cout)
        self.emb = nn.Linear(emb_dim, cout)

    def forward(self, x, e):
        h = self.norm(self.conv(x))
        return F.relu(h + self.emb(e)[:, :, None, None, None])


class Encoder(nn.Module):
    """q(z | base, target, covariates): 4 x (2 conv + maxpool), then a conv whose
    kernel spans the remaining grid and emits 2 * latent_dim numbers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g, e = cfg.groupnorm_groups, cfg.conditioning_dim
        blocks, cin = [], 2
        for c in cfg.channels:
            blocks.append(nn.ModuleList([ConvGN(cin, c, g, e), ConvGN(c, c, g, e)]))
            cin = c
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv3d(cin, 2 * cfg.latent_dim, kernel_size=cfg.bottom_size, stride=1)
        self.latent_dim = cfg.latent_dim

    def forward(self, pair, cond):
        h = pair
        for conv_a, conv_b in self.blocks:
            h = conv_b(conv_a(h, cond), cond)
            h = F.max_pool3d(h, kernel_size=2, stride=2)
        out = self.head(h).flatten(1)
        return out[:, : self.latent_dim], out[:, self.latent_dim :]


class Decoder(nn.Module):
    """U-net over the base volume conditioned on [z, covariates]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        g = cfg.groupnorm_groups
        e = cfg.latent_dim + cfg.conditioning_dim
        self.residual = cfg.residual
        down, cin = [], 1
        for c in cfg.channels:
            down.append(nn.ModuleList([ConvGN(cin, c, g, e), ConvGN(c, c, g, e)]))
            cin = c
        self.down = nn.ModuleList(down)
        self.bottleneck = nn.ModuleList([ConvGN(cin, cin, g, e), ConvGN(cin, cin, g, e)])
        up = []
        for c in reversed(cfg.channels):
            up.append(nn.ModuleList([ConvGN(cin, c, g, e), ConvGN(2 * c, c, g, e), ConvGN(c, c, g, e)]))
            cin = c
        self.up = nn.ModuleList(up)
        self.head = nn.Conv3d(cin, 1, kernel_size=1)

    def forward(self, base, z, cond):
        e = torch.cat([z, cond], dim=1)
        h, skips = base, []
        for conv_a, conv_b in self.down:
            h = conv_b(conv_a(h, e), e)
            skips.append(h)
            h = F.max_pool3d(h, kernel_size=2, stride=2)
        for conv in self.bottleneck:
            h = conv(h, e)
        for (up_conv, conv_a, conv_b), skip in zip(self.up, reversed(skips)):
            h = up_conv(F.interpolate(h, scale_factor=2, mode="nearest"), e)
            h = conv_b(conv_a(torch.cat([h, skip], dim=1), e), e)
        out = self.head(h)
        return base + out if self.residual else out


class DoubleEncoderCVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode(self, base, target, cond):
        return self.encoder(torch.cat([base, target], dim=1), cond)

    def decode(self, base, z, cond):
        return self.decoder(base, z, cond)

    def forward(self, base, target, cond, noise=None):
        """Returns (prediction, mean, logvar).  ``noise=None`` decodes the mean."""
        mu, logvar = self.encode(base, target, cond)
        z = mu if noise is None else reparameterize_t(mu, logvar, noise)
        return self.decode(base, z, cond), mu, logvar


# --------------------------------------------------------------------------
# loss


def reparameterize_t(mu, logvar, noise):
    return mu + torch.exp(0.5 * logvar) * noise


def kl_divergence_t(mu, logvar):
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I))."""
    # expm1 keeps exp(lv) - 1 - lv >= 0 when lv is tiny
    return 0.5 * torch.sum(mu**2 + torch.expm1(logvar) - logvar, dim=1)


def elbo_terms_t(target, predicted, mu, logvar, kl_weight: float = 1.0):
    """Per-sample (total, recon, kl) with recon = 0.5 * sum of squared error."""
    recon = 0.5 * torch.sum((target - predicted) ** 2, dim=tuple(range(1, target.dim())))
    kl = kl_divergence_t(mu, logvar)
    return recon + kl_weight * kl, recon, kl


def reparameterize(g: LatentGaussian, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != latent shape {g.mean.shape}")
    return g.mean + np.exp(g.logvar / 2.0) * noise


def kl_divergence(g: LatentGaussian) -> float:
    mu, lv = g.mean, g.logvar
    return float(0.5 * np.sum(mu**2 + np.expm1(lv) - lv))


def elbo_loss(target, predicted, g: LatentGaussian, kl_weight: float = 1.0) -> tuple[float, float, float]:
    t = np.asarray(getattr(target, "data", target), dtype=np.float64)
    p = np.asarray(getattr(predicted, "data", predicted), dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {p.shape}")
    recon = 0.5 * float(np.sum((t - p) ** 2))
    kl = kl_divergence(g)
    return recon + kl_weight * kl, recon, kl


# --------------------------------------------------------------------------
# Volume-level wrappers


def _check_grid(model: DoubleEncoderCVAE, vol: Volume) -> None:
    n = model.cfg.image_size
    if vol.shape != (n, n, n):
        raise ValueError(f"volume shape {vol.shape} does not match model grid {n}^3")


def _vol_tensor(vol: Volume, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(vol.data), dtype=dtype)[None, None]


def _param_dtype(model: nn.Module):
    return next(model.parameters()).dtype


@torch.no_grad()
def encode(base: Volume, target: Volume, cond: ConditioningVector, model: DoubleEncoderCVAE) -> LatentGaussian:
    _check_grid(model, base)
    _check_grid(model, target)
    dt = _param_dtype(model)
    mu, lv = model.encode(_vol_tensor(base, dt), _vol_tensor(target, dt), cond.as_tensor(dt))
    return LatentGaussian(mu[0].double().numpy(), lv[0].double().numpy())


@torch.no_grad()
def decode(base: Volume, z, cond: ConditioningVector, model: DoubleEncoderCVAE) -> Volume:
    _check_grid(model, base)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.cfg.latent_dim,):
        raise ValueError(f"z must have length {model.cfg.latent_dim}, got shape {z.shape}")
    dt = _param_dtype(model)
    out = model.decode(_vol_tensor(base, dt), torch.as_tensor(z, dtype=dt)[None], cond.as_tensor(dt))
    return base.with_data(out[0, 0].float().numpy())


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: DoubleEncoderCVAE
    standardizer: Standardizer | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: nn.Module, cfg, standardizer: Standardizer | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__config__"] = np.array(cfg.to_json())
    arrays["__kind__"] = np.array(type(model).__name__)
    if standardizer is not None:
        arrays["__standardizer__"] = np.array(json.dumps(standardizer.to_dict()))
    arrays["__meta__"] = np.array(json.dumps(meta or {}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint_arrays(path) -> tuple[dict, dict]:
    """(tensors, json_entries) from a checkpoint container."""
    with np.load(Path(path), allow_pickle=False) as z:
        tensors, extra = {}, {}
        for k in z.files:
            if k.startswith("__"):
                extra[k.strip("_")] = str(z[k])
            else:
                tensors[k] = torch.from_numpy(z[k].copy())
    return tensors, extra


def load_checkpoint(path) -> Checkpoint:
    tensors, extra = read_checkpoint_arrays(path)
    if extra.get("kind", "DoubleEncoderCVAE") != "DoubleEncoderCVAE":
        raise ValueError(f"{path} holds a {extra['kind']}, not a DoubleEncoderCVAE")
    cfg = ModelConfig.from_json(extra["config"])
    model = DoubleEncoderCVAE(cfg)
    dtype = next(iter(tensors.values())).dtype
    model.to(dtype)
    model.load_state_dict(tensors)
    model.eval()
    std = Standardizer(**json.loads(extra["standardizer"])) if "standardizer" in extra else None
    meta = json.loads(extra.get("meta", "{}"))
    return Checkpoint(model, std, meta)
