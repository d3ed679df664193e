"""Comparison predictors: identity, low-rank SVD regression, and a plain VAE
with a linear mixed-effects model fitted in its latent space."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import statsmodels.formula.api as smf
import torch
import torch.nn as nn
from statsmodels.tools.sm_exceptions import ConvergenceWarning

from .cvae import elbo_terms_t, read_checkpoint_arrays, save_checkpoint
from .dataio import ImagePair, ScanRecord, Volume, group_by_subject

log = logging.getLogger(__name__)


class IdentifiabilityWarning(UserWarning):
    """A fixed effect cannot be separated from the others by the design."""


# --------------------------------------------------------------------------
# identity


def identity_predict(base: Volume) -> Volume:
    """The conditional (base) scan, returned unchanged as the prediction."""
    return base


# --------------------------------------------------------------------------
# low-rank SVD


@dataclass
class SvdModel:
    U: np.ndarray  # (p + 4, k)
    S: np.ndarray  # (k,)
    V: np.ndarray  # (N, k)
    Y: np.ndarray  # (p, N)
    k: int
    demo_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    demo_scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    shape: tuple | None = None

    @property
    def n_features(self) -> int:
        return self.U.shape[0]

    def save(self, path) -> None:
        path = Path(path)
        meta = {"k": self.k, "demo_mean": self.demo_mean.tolist(),
                "demo_scale": self.demo_scale.tolist(), "shape": list(self.shape) if self.shape else None}
        np.savez(path, U=self.U, S=self.S, V=self.V, Y=self.Y, __meta__=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> "SvdModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            return cls(z["U"], z["S"], z["V"], z["Y"], int(meta["k"]),
                       np.asarray(meta["demo_mean"]), np.asarray(meta["demo_scale"]),
                       tuple(meta["shape"]) if meta["shape"] else None)


def fit_svd_matrix(X: np.ndarray, Y: np.ndarray, k: int) -> SvdModel:
    """Truncated SVD of X (features x N) keeping the first ``k`` triples."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}")
    if k < 1 or k > X.shape[1]:
        raise ValueError(f"k={k} must be in 1..N={X.shape[1]}")
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    rank = int(np.sum(S > S[0] * max(X.shape) * np.finfo(float).eps)) if S.size else 0
    if k > rank:
        raise ValueError(f"k={k} exceeds rank(X)={rank}")
    return SvdModel(U[:, :k], S[:k], Vt[:k].T, Y, k)


def predict_svd_matrix(model: SvdModel, x: np.ndarray) -> np.ndarray:
    """Y V S^-1 U^T x for one column (or a matrix of columns)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != model.n_features:
        raise ValueError(f"input has {x.shape[0]} rows, model expects {model.n_features}")
    return model.Y @ (model.V @ ((model.U.T @ x) / (model.S if x.ndim == 1 else model.S[:, None])))


def _design_column(volume, demo, mean, scale) -> np.ndarray:
    img = np.asarray(getattr(volume, "data", volume), dtype=np.float64).ravel()
    d = (np.asarray(demo, dtype=np.float64) - mean) / scale
    return np.concatenate([img, d, [1.0]])


def fit_svd(first_volumes: Sequence, last_volumes: Sequence, demographics, k: int) -> SvdModel:
    """Fit the low-rank predictor on N subjects.

    ``demographics`` is (N, 3): age at the first scan, status, elapsed time.
    The three demographic rows are z-scored before the SVD; the constant row
    stays 1.
    """
    demo = np.asarray(demographics, dtype=np.float64).reshape(len(first_volumes), 3)
    mean = demo.mean(axis=0)
    scale = demo.std(axis=0)
    if np.any(scale == 0):
        log.warning("constant demographic row(s) %s left unscaled", np.flatnonzero(scale == 0).tolist())
        scale = np.where(scale == 0, 1.0, scale)
    X = np.stack([_design_column(v, d, mean, scale) for v, d in zip(first_volumes, demo)], axis=1)
    Y = np.stack([np.asarray(getattr(v, "data", v), dtype=np.float64).ravel() for v in last_volumes], axis=1)
    model = fit_svd_matrix(X, Y, k)
    model.demo_mean, model.demo_scale = mean, scale
    model.shape = tuple(np.asarray(getattr(first_volumes[0], "data", first_volumes[0])).shape)
    return model


def predict_svd(model: SvdModel, base: Volume, age: float, status: float, delta_t: float) -> Volume:
    x = _design_column(base, [age, status, delta_t], model.demo_mean, model.demo_scale)
    y = predict_svd_matrix(model, x)
    return base.with_data(y.reshape(base.shape).astype(np.float32))


def first_last_pairs(records: Sequence[ScanRecord], exclude_single: bool = False) -> list[ImagePair]:
    """(first, last) scan pair per subject; single-scan subjects give a
    self-pair unless ``exclude_single``."""
    out = []
    for sid, scans in group_by_subject(records).items():
        if len(scans) == 1 and exclude_single:
            continue
        out.append(ImagePair(sid, scans[0], scans[-1]))
    return out


# --------------------------------------------------------------------------
# plain VAE (latent space for the mixed-effects baseline)


@dataclass
class VaeConfig:
    latent_dim: int = 10
    channels: tuple = (8, 16, 32, 32)
    image_size: int = 32
    kl_weight: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.image_size % 2 ** len(self.channels):
            raise ValueError("image_size must be divisible by 2**len(channels)")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class ImageVAE(nn.Module):
    """Strided-conv encoder / upsampling decoder VAE over single volumes."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        enc, cin = [], 1
        for c in cfg.channels:
            enc += [nn.Conv3d(cin, c, 3, stride=2, padding=1), nn.GroupNorm(4 if c % 4 == 0 else 1, c), nn.ReLU()]
            cin = c
        self.enc = nn.Sequential(*enc)
        self.bottom = cfg.image_size // 2 ** len(cfg.channels)
        flat = cin * self.bottom**3
        self.to_latent = nn.Linear(flat, 2 * cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, flat)
        dec = []
        chans = list(reversed(cfg.channels))
        for i, c in enumerate(chans):
            cout = chans[i + 1] if i + 1 < len(chans) else chans[-1]
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(c, cout, 3, padding=1),
                    nn.GroupNorm(4 if cout % 4 == 0 else 1, cout), nn.ReLU()]
        self.dec = nn.Sequential(*dec)
        self.head = nn.Conv3d(chans[-1], 1, 1)

    def encode(self, x):
        out = self.to_latent(self.enc(x).flatten(1))
        d = self.cfg.latent_dim
        return out[:, :d], out[:, d:]

    def decode(self, z):
        h = self.from_latent(z).view(z.shape[0], -1, self.bottom, self.bottom, self.bottom)
        return self.head(self.dec(h))

    def forward(self, x, noise=None):
        mu, lv = self.encode(x)
        z = mu if noise is None else mu + torch.exp(0.5 * lv) * noise
        return self.decode(z), mu, lv


def train_vae(volumes: Sequence[np.ndarray], cfg: VaeConfig, epochs: int = 20, lr: float = 1e-3,
              batch_size: int = 4, seed: int = 0) -> ImageVAE:
    torch.manual_seed(seed)
    model = ImageVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    data = torch.as_tensor(np.stack([np.asarray(v, dtype=np.float32) for v in volumes])[:, None])
    gen = torch.Generator().manual_seed(seed)
    n = len(data)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        tot = 0.0
        for i in range(0, n, batch_size):
            x = data[order[i : i + batch_size]]
            noise = torch.randn(len(x), cfg.latent_dim, generator=gen)
            pred, mu, lv = model(x, noise)
            total, _, _ = elbo_terms_t(x, pred, mu, lv, cfg.kl_weight)
            opt.zero_grad()
            total.mean().backward()
            opt.step()
            tot += total.sum().item()
        log.info("vae epoch %d loss %.3f", epoch + 1, tot / n)
    model.eval()
    return model


def save_vae(path, model: ImageVAE) -> None:
    save_checkpoint(path, model, model.cfg)


def load_vae(path) -> ImageVAE:
    tensors, extra = read_checkpoint_arrays(path)
    if extra.get("kind") != "ImageVAE":
        raise ValueError(f"{path} is not an ImageVAE checkpoint")
    model = ImageVAE(VaeConfig(**json.loads(extra["config"])))
    model.load_state_dict(tensors)
    model.eval()
    return model


@torch.no_grad()
def vae_encode(model: ImageVAE, volume) -> np.ndarray:
    x = torch.as_tensor(np.asarray(getattr(volume, "data", volume), dtype=np.float32))[None, None]
    return model.encode(x)[0][0].double().numpy()


@torch.no_grad()
def vae_decode(model: ImageVAE, z) -> np.ndarray:
    out = model.decode(torch.as_tensor(np.asarray(z, dtype=np.float32))[None])
    return out[0, 0].numpy()


# --------------------------------------------------------------------------
# linear mixed effects in the latent space

FIXED_EFFECTS = ("intercept", "time", "status", "status_time")


@dataclass
class LmeModel:
    """Per-latent-dimension coefficients, each a dict with keys
    intercept, time, status, status_time, re_var, resid_var."""

    coefficients: list
    dropped: list = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return len(self.coefficients)

    def time_slope(self, status: float) -> np.ndarray:
        return np.array([c["time"] + c["status_time"] * status for c in self.coefficients])

    def shift(self, z: np.ndarray, status: float, delta_t: float) -> np.ndarray:
        """Latent moved along the fitted time direction for ``status``."""
        return np.asarray(z, dtype=np.float64) + delta_t * self.time_slope(status)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"coefficients": self.coefficients, "dropped": self.dropped}, indent=2))

    @classmethod
    def load(cls, path) -> "LmeModel":
        d = json.loads(Path(path).read_text())
        return cls(d["coefficients"], d.get("dropped", []))


def _identifiable_terms(df: pd.DataFrame) -> tuple[list[str], list[str]]:
    cols = {"time": df["time"].to_numpy(), "status": df["status"].to_numpy(),
            "status_time": (df["status"] * df["time"]).to_numpy()}
    keep, dropped = [], []
    design = [np.ones(len(df))]
    for name in ("time", "status", "status_time"):
        trial = np.stack(design + [cols[name]], axis=1)
        if np.linalg.matrix_rank(trial) > len(design):
            design.append(cols[name])
            keep.append(name)
        else:
            dropped.append(name)
    return keep, dropped


def fit_lme(latents: np.ndarray, subjects: Sequence[str], times, statuses) -> LmeModel:
    """Random-intercept LME per latent dimension, fitted by maximum likelihood:
    z_j ~ 1 + t + status + status:t + (1 | subject)."""
    latents = np.asarray(latents, dtype=np.float64)
    df = pd.DataFrame({"subject": list(subjects), "time": np.asarray(times, float),
                       "status": np.asarray(statuses, float)})
    if df.groupby("subject").size().max() < 2:
        raise ValueError("every subject has a single scan; the random intercept is unidentifiable")
    keep, dropped = _identifiable_terms(df)
    for name in dropped:
        warnings.warn(f"fixed effect '{name}' is not identifiable from this design; set to 0",
                      IdentifiabilityWarning, stacklevel=2)
    rhs = " + ".join(["1"] + [{"status_time": "status:time"}.get(k, k) for k in keep])
    coefs = []
    for j in range(latents.shape[1]):
        d = df.assign(z=latents[:, j])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            warnings.filterwarnings("ignore", message=".*(singular|boundary|Retrying).*")
            res = smf.mixedlm(f"z ~ {rhs}", d, groups=d["subject"]).fit(reml=False)
        fe = res.fe_params
        c = {
            "intercept": float(fe["Intercept"]),
            "time": float(fe.get("time", 0.0)),
            "status": float(fe.get("status", 0.0)),
            "status_time": float(fe.get("status:time", 0.0)),
            "re_var": max(float(np.asarray(res.cov_re)[0, 0]), 0.0),
            "resid_var": max(float(res.scale), 0.0),
        }
        coefs.append(c)
    return LmeModel(coefs, dropped)


def fit_vae_lme(vae: ImageVAE, records: Sequence[ScanRecord], loader) -> LmeModel:
    """Encode every training scan to its latent mean, then fit the LME."""
    lat = np.stack([vae_encode(vae, loader(r.path)) for r in records])
    return fit_lme(lat, [r.subject_id for r in records], [r.time_years for r in records],
                   [r.status for r in records])


def predict_vae_lme(model: LmeModel, vae: ImageVAE, base: Volume, status: float, delta_t: float) -> Volume:
    """Encode the base scan, shift its latent by the LME time effect, decode."""
    z = vae_encode(vae, base)
    if z.shape[0] != model.latent_dim:
        raise ValueError(f"VAE latent dim {z.shape[0]} != LME dim {model.latent_dim}")
    return base.with_data(vae_decode(vae, model.shift(z, status, delta_t)))


def mse(a, b) -> float:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    return float(np.mean((a - b) ** 2))

