"""Adam training loop for the CVAE with validation and early stopping."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .cvae import (
    Checkpoint,
    DoubleEncoderCVAE,
    ModelConfig,
    elbo_terms_t,
    save_checkpoint,
)
from .dataio import ImagePair, Standardizer, apply_standardizer, load_volume

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    max_epochs: int = 1000
    patience: int = 25
    seed: int = 0
    checkpoint_every: int = 1
    steps_per_epoch: int | None = None
    deterministic: bool = True
    lr_schedule: str = "constant"
    kl_warmup_epochs: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.patience < 1 or (self.max_epochs > 0 and self.patience >= self.max_epochs):
            raise ValueError("patience must be >= 1 and < max_epochs")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.kl_warmup_epochs < 0 or (self.max_epochs > 0 and self.kl_warmup_epochs >= self.max_epochs):
            raise ValueError("kl_warmup_epochs must be >= 0 and < max_epochs")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; cosine decays to 5% of the
        initial rate at ``max_epochs``."""
        if self.lr_schedule == "constant" or self.max_epochs <= 1:
            return self.learning_rate
        frac = (epoch - 1) / (self.max_epochs - 1)
        return self.learning_rate * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac)))

    def kl_scale(self, epoch: int) -> float:
        """Multiplier on the KL weight for 1-based ``epoch``: a linear ramp
        from 0 over the warm-up epochs, then 1."""
        if epoch > self.kl_warmup_epochs:
            return 1.0
        return (epoch - 1) / self.kl_warmup_epochs


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        cols = [
            "epoch", "train_total", "train_recon", "train_kl",
            "val_total", "val_recon", "val_kl", "wall_time",
        ]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r[c] for c in cols})


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


class VolumeCache:
    """Loads each volume path once and keeps the float32 array."""

    def __init__(self, loader: Callable = load_volume):
        self._loader = loader
        self._data: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        arr = self._data.get(path)
        if arr is None:
            arr = np.asarray(self._loader(path).data, dtype=np.float32)
            self._data[path] = arr
        return arr


def pair_batch(pairs: Sequence[ImagePair], std: Standardizer, cache: VolumeCache, dtype=torch.float32):
    base = np.stack([cache(p.base_scan.path) for p in pairs])[:, None]
    target = np.stack([cache(p.target_scan.path) for p in pairs])[:, None]
    cond = np.array([apply_standardizer(std, p) for p in pairs])
    return (
        torch.as_tensor(base, dtype=dtype),
        torch.as_tensor(target, dtype=dtype),
        torch.as_tensor(cond, dtype=dtype),
    )


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    s = np.random.SeedSequence([seed, epoch, 7]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(s))


def _set_deterministic(on: bool) -> None:
    torch.use_deterministic_algorithms(on, warn_only=True)


@torch.no_grad()
def validate(
    checkpoint: Checkpoint | DoubleEncoderCVAE,
    pairs: Sequence[ImagePair],
    std: Standardizer | None = None,
    cache: VolumeCache | None = None,
    batch_size: int = 8,
) -> dict:
    """Mean total / recon / kl per pair, decoding the latent mean."""
    if not pairs:
        raise ValueError("validate needs at least one pair")
    if isinstance(checkpoint, Checkpoint):
        model, std = checkpoint.model, std or checkpoint.standardizer
    else:
        model = checkpoint
    if std is None:
        raise ValueError("validate needs a standardizer")
    cache = cache or VolumeCache()
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    sums = np.zeros(3)
    for i in range(0, len(pairs), batch_size):
        base, target, cond = pair_batch(pairs[i : i + batch_size], std, cache, dtype)
        pred, mu, lv = model(base, target, cond)
        total, recon, kl = elbo_terms_t(target, pred, mu, lv, model.cfg.kl_weight)
        sums += [total.sum().item(), recon.sum().item(), kl.sum().item()]
    model.train(was_training)
    mean = sums / len(pairs)
    return {"total": float(mean[0]), "recon": float(mean[1]), "kl": float(mean[2])}


def init_model(model_cfg: ModelConfig, seed: int) -> DoubleEncoderCVAE:
    torch.manual_seed(seed)
    return DoubleEncoderCVAE(model_cfg)


def train(
    train_pairs: Sequence[ImagePair],
    val_pairs: Sequence[ImagePair],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    standardizer: Standardizer,
    out_dir: str | Path | None = None,
    cache: VolumeCache | None = None,
    resume: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Fit the CVAE; returns the best-validation checkpoint and the epoch log.

    ``out_dir`` receives ``best.npz``, ``last_state.pt`` and ``train_log.csv``.
    ``resume`` continues from a ``last_state.pt``.  ``stop_after_epoch``
    halts early (for checkpoint/resume workflows) without touching the
    schedule, which is seeded per epoch.
    """
    if not train_pairs:
        raise ValueError("training set is empty")
    cache = cache or VolumeCache()
    val_pairs = list(val_pairs) or list(train_pairs)
    _set_deterministic(train_cfg.deterministic)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = init_model(model_cfg, train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    tlog = TrainLog()
    start_epoch, best_loss, bad_epochs = 1, math.inf, 0
    best_state = copy.deepcopy(model.state_dict())
    if resume is not None:
        state = torch.load(resume, weights_only=False)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        tlog = TrainLog(state["log_rows"], state["best_epoch"])
        best_state, best_loss = state["best_state"], state["best_loss"]
        bad_epochs, start_epoch = state["bad_epochs"], state["epoch"] + 1

    def make_ckpt(sd) -> Checkpoint:
        m = DoubleEncoderCVAE(model_cfg)
        m.load_state_dict(sd)
        m.eval()
        return Checkpoint(m, standardizer, {"best_epoch": tlog.best_epoch})

    n = len(train_pairs)
    bs = train_cfg.batch_size
    t0 = time.time()
    for epoch in range(start_epoch, train_cfg.max_epochs + 1):
        model.train()
        for group in opt.param_groups:
            group["lr"] = train_cfg.lr_at(epoch)
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        n_steps = math.ceil(n / bs)
        if train_cfg.steps_per_epoch is not None:
            n_steps = min(n_steps, train_cfg.steps_per_epoch)
        gen = _epoch_generator(train_cfg.seed, epoch)
        kl_weight = model_cfg.kl_weight * train_cfg.kl_scale(epoch)
        sums, seen = np.zeros(3), 0
        for step in range(n_steps):
            batch = [train_pairs[i] for i in order[step * bs : (step + 1) * bs]]
            base, target, cond = pair_batch(batch, standardizer, cache)
            noise = torch.randn(len(batch), model_cfg.latent_dim, generator=gen)
            pred, mu, lv = model(base, target, cond, noise=noise)
            total, recon, kl = elbo_terms_t(target, pred, mu, lv, kl_weight)
            loss = total.mean()
            if not torch.isfinite(loss):
                ckpt = make_ckpt(best_state)
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.npz", ckpt.model, model_cfg, standardizer, ckpt.meta)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(recon={recon.mean().item()}, kl={kl.mean().item()})",
                    ckpt,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [total.sum().item(), recon.sum().item(), kl.sum().item()]
            seen += len(batch)

        val = validate(model, val_pairs, standardizer, cache)
        row = {
            "epoch": epoch,
            "train_total": sums[0] / seen,
            "train_recon": sums[1] / seen,
            "train_kl": sums[2] / seen,
            "val_total": val["total"],
            "val_recon": val["recon"],
            "val_kl": val["kl"],
            "wall_time": time.time() - t0,
        }
        tlog.rows.append(row)
        log.info(
            "epoch %d train %.3f (recon %.3f kl %.3f) val %.3f",
            epoch, row["train_total"], row["train_recon"], row["train_kl"], row["val_total"],
        )
        # warm-up epochs optimise a different objective and are never kept
        if epoch <= train_cfg.kl_warmup_epochs:
            pass
        elif val["total"] < best_loss:
            best_loss, bad_epochs = val["total"], 0
            best_state = copy.deepcopy(model.state_dict())
            tlog.best_epoch = epoch
        else:
            bad_epochs += 1

        if out_dir is not None and (epoch % train_cfg.checkpoint_every == 0 or bad_epochs >= train_cfg.patience):
            torch.save(
                {
                    "model": model.state_dict(),
                    "optimizer": opt.state_dict(),
                    "log_rows": tlog.rows,
                    "best_epoch": tlog.best_epoch,
                    "best_state": best_state,
                    "best_loss": best_loss,
                    "bad_epochs": bad_epochs,
                    "epoch": epoch,
                    "train_config": asdict(train_cfg),
                },
                out_dir / "last_state.pt",
            )
            tlog.write_csv(out_dir / "train_log.csv")
        if bad_epochs >= train_cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, tlog.best_epoch)
            break
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    ckpt = make_ckpt(best_state)
    if out_dir is not None:
        save_checkpoint(out_dir / "best.npz", ckpt.model, model_cfg, standardizer, ckpt.meta)
        tlog.write_csv(out_dir / "train_log.csv")
    return ckpt, tlog
