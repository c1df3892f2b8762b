"""Losses, reconstruction targets and the training loops."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, validate_config
from .model import CNNBaseline, ReconAttentionNet

log = logging.getLogger(__name__)

LOW_CUTOFF = 6.0
HIGH_CUTOFF = 30.0

# A run whose best validation accuracy is still at chance after this many
# epochs is treated as diverged (Adam at lr 0.1 stalls rather than overflowing).
STALL_EPOCHS = 2
STALL_ACCURACY = 0.2


class TrainingDiverged(RuntimeError):
    pass


def margin_loss(scores, labels, m_pos=0.9, m_neg=0.1, lam=0.5, reduction="mean"):
    """Capsule margin loss summed over classes.

    ``scores`` is (B, 10) or (10,); ``labels`` is (B,) or a scalar index.
    """
    scores = torch.as_tensor(scores)
    single = scores.dim() == 1
    scores = scores.reshape(-1, scores.shape[-1])
    labels = torch.as_tensor(labels).reshape(-1)
    t = F.one_hot(labels.long(), scores.shape[-1]).to(scores.dtype)
    per = (t * F.relu(m_pos - scores) ** 2 + lam * (1 - t) * F.relu(scores - m_neg) ** 2).sum(dim=-1)
    if single:
        return per[0]
    if reduction == "mean":
        return per.mean()
    if reduction == "sum":
        return per.sum()
    return per


def reconstruction_loss(recon, target, reduction="mean"):
    """Mean squared error over the 28x28 pixels, averaged over the batch."""
    per = ((recon - target) ** 2).mean(dim=(-2, -1))
    if per.dim() == 0 or reduction == "none":
        return per
    return per.mean()


def lr_at_epoch(epoch: int, initial_lr: float = 0.1, decay: float = 0.96) -> float:
    return initial_lr * decay**epoch


def _gaussian_gain(freq, cutoff, high_pass):
    # Both filters pass exactly half the power at the cutoff.
    if high_pass:
        sigma2 = cutoff**2 / (2 * math.log(1 / (1 - 2**-0.5)))
        return 1 - np.exp(-(freq**2) / (2 * sigma2))
    sigma2 = cutoff**2 / math.log(2)
    return np.exp(-(freq**2) / (2 * sigma2))


def frequency_gain(mode: str, size: int = 28) -> np.ndarray:
    """Frequency-domain gain (size, size) in FFT layout, radial frequency in cycles/image."""
    f = np.fft.fftfreq(size) * size
    radius = np.hypot(f[:, None], f[None, :])
    if mode == "full_spectrum":
        return np.ones_like(radius)
    if mode == "low_freq":
        return _gaussian_gain(radius, LOW_CUTOFF, high_pass=False)
    if mode == "high_freq":
        return _gaussian_gain(radius, HIGH_CUTOFF, high_pass=True)
    raise ValueError(f"unknown recon_target_mode {mode!r}")


def frequency_target(images: np.ndarray, mode: str = "full_spectrum") -> np.ndarray:
    """Filter images (..., 28, 28) to the reconstruction target of ``mode``, clipped to [0, 1]."""
    images = np.asarray(images, dtype=np.float32)
    if mode == "full_spectrum":
        return images.copy()
    gain = frequency_gain(mode, images.shape[-1])
    out = np.fft.ifft2(np.fft.fft2(images) * gain).real
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: list[dict] = field(default_factory=list)
    best_val_accuracy: float = 0.0
    best_epoch: int = -1
    initial_lr: float = 0.0
    fell_back: bool = False

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "lr", "train_loss", "val_accuracy"])
            writer.writeheader()
            writer.writerows(self.log)


def split_train_val(n: int, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * fraction)))
    return perm[n_val:], perm[:n_val]


@torch.no_grad()
def predict(model, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Single-pass predictions (no global iterations)."""
    was = model.training
    model.eval()
    out = [model(images[i : i + batch_size]).argmax(dim=-1) for i in range(0, len(images), batch_size)]
    model.train(was)
    return torch.cat(out)


def _fit(model, loss_fn: Callable, images, labels, targets, config: ModelConfig, seed: int, lr: float,
         max_epochs: Optional[int], on_epoch: Optional[Callable]) -> TrainResult:
    train_idx, val_idx = split_train_val(len(images), config.validation_fraction, seed)
    x = torch.as_tensor(images, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    tgt = torch.as_tensor(targets, dtype=torch.float32)
    x_val, y_val = x[val_idx], y[val_idx]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    result = TrainResult(model, initial_lr=lr)
    best_state, bad = None, 0

    for epoch in range(max_epochs or config.max_epochs):
        epoch_lr = lr_at_epoch(epoch, lr, config.lr_decay)
        for group in opt.param_groups:
            group["lr"] = epoch_lr
        model.train()
        order = torch.as_tensor(train_idx)[torch.randperm(len(train_idx), generator=gen)]
        total, seen, t0 = 0.0, 0, time.time()
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = loss_fn(model, x[idx], y[idx], tgt[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}, batch {start // config.batch_size}, lr {epoch_lr:g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        val_acc = float((predict(model, x_val) == y_val).float().mean())
        row = {"epoch": epoch, "lr": epoch_lr, "train_loss": total / seen, "val_accuracy": val_acc}
        result.log.append(row)
        log.info("epoch %d lr %.3g loss %.4f val %.4f (%.0fs)", epoch, epoch_lr, row["train_loss"], val_acc, time.time() - t0)
        if on_epoch:
            on_epoch(row)
        if epoch + 1 == STALL_EPOCHS and max(r["val_accuracy"] for r in result.log) <= STALL_ACCURACY:
            raise TrainingDiverged(f"validation accuracy still at chance ({val_acc:.3f}) after {STALL_EPOCHS} epochs at lr {lr:g}")
        if val_acc > result.best_val_accuracy or best_state is None:
            result.best_val_accuracy, result.best_epoch = val_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    return result


def capsule_loss(model: ReconAttentionNet, x, y, target):
    cfg = model.config
    result = model.step(x, target=target, binding=True)
    loss = margin_loss(result.class_scores, y, cfg.margin_pos, cfg.margin_neg, cfg.margin_lambda)
    if cfg.recon_loss_weight > 0:
        recon = model.decoder.decode(result.poses, y)
        loss = loss + cfg.recon_loss_weight * reconstruction_loss(recon, target)
    return loss


def cross_entropy_loss(model, x, y, target):
    return F.cross_entropy(model(x), y)


def _with_fallback(build: Callable, loss_fn, images, labels, targets, config, seed, lr, fallback, max_epochs, on_epoch):
    lr = config.initial_lr if lr is None else lr
    torch.manual_seed(seed)
    try:
        return _fit(build(), loss_fn, images, labels, targets, config, seed, lr, max_epochs, on_epoch)
    except TrainingDiverged as exc:
        if not fallback or lr == config.fallback_lr:
            raise
        log.warning("%s; restarting with fallback lr %g", exc, config.fallback_lr)
    torch.manual_seed(seed)
    result = _fit(build(), loss_fn, images, labels, targets, config, seed, config.fallback_lr, max_epochs, on_epoch)
    result.fell_back = True
    return result


def train(images, labels, config: ModelConfig, seed: int = 0, *, lr: Optional[float] = None, fallback: bool = True,
          max_epochs: Optional[int] = None, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train the capsule model on clean images with margin + reconstruction loss.

    Uses one global step with full local routing per forward pass. The best
    validation-accuracy weights are restored before returning. If the run
    diverges (non-finite loss, or stuck at chance) it restarts once at
    ``config.fallback_lr``.
    """
    validate_config(config)
    if len(images) == 0:
        raise ValueError("empty training set")
    targets = frequency_target(images, config.recon_target_mode)
    return _with_fallback(lambda: ReconAttentionNet(config), capsule_loss, images, labels, targets,
                          config, seed, lr, fallback, max_epochs, on_epoch)


def train_baseline(images, labels, config: ModelConfig, seed: int = 0, *, lr: Optional[float] = None,
                   fallback: bool = True, max_epochs: Optional[int] = None,
                   on_epoch: Optional[Callable] = None) -> TrainResult:
    """Backbone + dense head trained with cross-entropy on the same schedule."""
    validate_config(config)
    if len(images) == 0:
        raise ValueError("empty training set")
    return _with_fallback(lambda: CNNBaseline(config.encoder_kind), cross_entropy_loss, images, labels, images,
                          config, seed, lr, fallback, max_epochs, on_epoch)
