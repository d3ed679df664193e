"""Inference with a trained CVAE: single and multi-horizon prediction and
the latent-space disease-status posterior."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .cvae import Checkpoint, ConditioningVector, decode, encode
from .dataio import Standardizer, Volume, save_volume

log = logging.getLogger(__name__)


class PredictionError(ValueError):
    pass


@dataclass
class TrajectoryRequest:
    base: Volume
    age: float
    status: float
    horizons: Sequence[float]
    latent_mode: str = "sampled"  # sampled | zero | explicit
    seed: int = 0
    latent: np.ndarray | None = None

    def __post_init__(self):
        if self.latent_mode not in ("sampled", "zero", "explicit"):
            raise ValueError(f"unknown latent mode {self.latent_mode!r}")
        if self.latent_mode == "explicit" and self.latent is None:
            raise ValueError("explicit latent mode needs a latent vector")
        if not all(math.isfinite(h) for h in self.horizons):
            raise ValueError("horizons must be finite")


@dataclass
class PosteriorResult:
    hypotheses: tuple
    means: dict  # hypothesis -> encoder mean
    log_f: dict  # hypothesis -> log standard-normal density of the mean
    posterior: dict = field(default_factory=dict)

    @property
    def p_null(self) -> float:
        return self.posterior[self.hypotheses[0]]

    def to_dict(self) -> dict:
        null, alt = self.hypotheses[0], self.hypotheses[-1]
        return {
            "hypotheses": list(self.hypotheses),
            "mu_null": np.asarray(self.means[null]).tolist(),
            "mu_alt": np.asarray(self.means[alt]).tolist(),
            "log_f_null": self.log_f[null],
            "log_f_alt": self.log_f[alt],
            "p_null": self.p_null,
            "posterior": {str(k): v for k, v in self.posterior.items()},
        }


def _standardizer(ckpt: Checkpoint, std: Standardizer | None) -> Standardizer:
    std = std or ckpt.standardizer
    if std is None:
        raise PredictionError("no standardizer: pass one or use a checkpoint that embeds it")
    return std


def conditioning(std: Standardizer, age: float, status: float, delta_t: float) -> ConditioningVector:
    a, d = float(std.age(age)), float(std.delta_t(delta_t))
    if not (math.isfinite(a) and math.isfinite(d)):
        raise PredictionError(f"non-finite standardized covariates (age={a}, delta_t={d})")
    if abs(d) > 3.0:
        log.warning("delta_t=%.2f y is %.1f SD from the training mean; extrapolating", delta_t, abs(d))
    return ConditioningVector(a, d, float(status))


def latent_vector(latent_dim: int, mode: str, seed: int = 0, latent=None) -> np.ndarray:
    if mode == "zero":
        return np.zeros(latent_dim)
    if mode == "sampled":
        return np.random.default_rng(seed).standard_normal(latent_dim)
    if mode == "explicit":
        z = np.asarray(latent, dtype=np.float64)
        if z.shape != (latent_dim,):
            raise PredictionError(f"explicit latent must have length {latent_dim}")
        return z
    raise PredictionError(f"unknown latent mode {mode!r}")


def predict_future(ckpt: Checkpoint, base: Volume, age: float, status: float, delta_t: float,
                   latent_mode: str = "sampled", seed: int = 0, latent=None,
                   standardizer: Standardizer | None = None) -> Volume:
    """Decode ``base`` forward by ``delta_t`` years with z drawn per ``latent_mode``."""
    std = _standardizer(ckpt, standardizer)
    z = latent_vector(ckpt.model.cfg.latent_dim, latent_mode, seed, latent)
    return decode(base, z, conditioning(std, age, status, delta_t), ckpt.model)


def trajectory(ckpt: Checkpoint, request: TrajectoryRequest,
               standardizer: Standardizer | None = None) -> list[Volume]:
    """One prediction per horizon, all sharing a single latent draw."""
    std = _standardizer(ckpt, standardizer)
    z = latent_vector(ckpt.model.cfg.latent_dim, request.latent_mode, request.seed, request.latent)
    return [
        decode(request.base, z, conditioning(std, request.age, request.status, h), ckpt.model)
        for h in request.horizons
    ]


def save_trajectory(volumes: Sequence[Volume], request: TrajectoryRequest, latent: np.ndarray,
                    out_dir, suffix: str = "nii.gz") -> Path:
    """Write one volume per horizon and an ``index.json`` mapping horizon to file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"horizons": {}, "seed": request.seed, "latent_mode": request.latent_mode,
             "latent": np.asarray(latent).tolist(), "age": request.age, "status": request.status}
    for h, vol in zip(request.horizons, volumes):
        name = f"horizon_{h:+08.3f}y.{suffix}"
        save_volume(vol, out_dir / name)
        index["horizons"][repr(float(h))] = name
    path = out_dir / "index.json"
    path.write_text(json.dumps(index, indent=2) + "\n")
    return path


def posterior_from_means(means: dict, hypotheses: Sequence) -> PosteriorResult:
    """p_i = f_i / sum_k f_k with f_i the standard-normal density of mean i,
    evaluated in the log domain."""
    hyps = tuple(hypotheses)
    log_f = {}
    for h in hyps:
        mu = np.asarray(means[h], dtype=np.float64)
        if not np.all(np.isfinite(mu)):
            raise PredictionError(f"non-finite encoder mean under hypothesis {h}")
        log_f[h] = float(-0.5 * mu.size * math.log(2 * math.pi) - 0.5 * float(mu @ mu))
    lf = np.array([log_f[h] for h in hyps])
    post = np.exp(lf - logsumexp(lf))
    result = PosteriorResult(hyps, {h: np.asarray(means[h]) for h in hyps}, log_f)
    result.posterior = {h: float(p) for h, p in zip(hyps, post)}
    if len(hyps) == 2:
        # two-way case written as a sigmoid so p_null + p_alt == 1 exactly
        p0 = float(1.0 / (1.0 + math.exp(min(lf[1] - lf[0], 709.0))))
        result.posterior = {hyps[0]: p0, hyps[1]: 1.0 - p0}
    return result


def status_posterior(ckpt: Checkpoint, base: Volume, target: Volume, age: float, delta_t: float,
                     hypotheses: Sequence = (0, 5), standardizer: Standardizer | None = None) -> PosteriorResult:
    """Encode the (base, target) pair under each status hypothesis and compare
    the standard-normal densities of the encoder means.

    Only the means enter.  Passing all six statuses as ``hypotheses`` gives an
    n-way normalisation, an extension beyond the two-hypothesis test.
    """
    if target is None:
        raise PredictionError("status_posterior needs a follow-up scan")
    std = _standardizer(ckpt, standardizer)
    means = {h: encode(base, target, conditioning(std, age, h, delta_t), ckpt.model).mean for h in hypotheses}
    return posterior_from_means(means, hypotheses)
