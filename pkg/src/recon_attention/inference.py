"""Outer inference loop: reconstruct, mask, re-encode until confident."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .config import ModelConfig
from .routing import RoutingSnapshot

MAX_ENTROPY = math.log(10)


def spatial_mask(reconstruction: torch.Tensor, raw_input: torch.Tensor, threshold: float = 0.1):
    """Boolean mask from the reconstruction and the re-normalised masked input.

    Works on a single 28x28 image or a (B, 28, 28) batch. Inside the mask the
    raw intensities are min-max rescaled to [0, 1] (a single distinct value
    maps to 1); outside they are zeroed. An image whose mask is empty passes
    its raw input through unchanged.
    """
    single = reconstruction.dim() == 2
    rec = reconstruction.reshape(-1, 28, 28)
    raw = raw_input.reshape(-1, 28, 28)
    mask = rec > threshold

    big = torch.finfo(raw.dtype).max
    lo = torch.where(mask, raw, torch.full_like(raw, big)).amin(dim=(1, 2), keepdim=True)
    hi = torch.where(mask, raw, torch.full_like(raw, -big)).amax(dim=(1, 2), keepdim=True)
    span = hi - lo
    flat = span <= 0
    scaled = torch.where(flat, torch.ones_like(raw), (raw - lo) / torch.where(flat, torch.ones_like(span), span))
    masked = torch.where(mask, scaled, torch.zeros_like(raw))
    empty = ~mask.any(dim=(1, 2))
    masked[empty] = raw[empty]
    if single:
        return mask[0], masked[0]
    return mask, masked


def entropy_confidence(class_scores: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Natural-log entropy of softmax(class_scores / temperature) along the last axis."""
    logp = torch.log_softmax(class_scores / temperature, dim=-1)
    return -(logp.exp() * logp).sum(dim=-1)


@dataclass
class StepRecord:
    reconstruction: torch.Tensor  # (28, 28), most likely class
    mask: torch.Tensor  # (28, 28) bool
    masked_input: torch.Tensor  # (28, 28), input for the following step
    step_input: torch.Tensor  # (28, 28), what this step encoded
    class_scores: torch.Tensor  # (10,)
    entropy: float
    routing: list[RoutingSnapshot] = field(default_factory=list)


@dataclass
class InferenceTrace:
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def rt(self) -> int:
        return len(self.steps)


@dataclass
class BatchInference:
    predictions: torch.Tensor  # (B,) long
    rt: torch.Tensor  # (B,) long
    class_scores: torch.Tensor  # (B, 10) at the final step
    traces: Optional[list[InferenceTrace]] = None


def _slice_snapshot(s: RoutingSnapshot, k: int) -> RoutingSnapshot:
    def pick(t):
        return None if t is None else t[k]

    return RoutingSnapshot(
        s.iteration,
        s.coefficients[k],
        s.agreement[k],
        s.recon_factor[k],
        pick(s.scores_before),
        pick(s.recon_scores),
        pick(s.scores_after),
    )


@torch.no_grad()
def infer_batch(model, images: torch.Tensor, config: Optional[ModelConfig] = None, record: bool = False) -> BatchInference:
    """Run the global loop on every image, each stopping on its own.

    Step 1 sees the raw image; each later step sees the raw image masked by
    the previous step's argmax-class reconstruction. An image stops at the
    first step whose entropy is below the threshold, or at the step limit.
    With the spatial mask disabled every step would see the same input and
    reproduce the same output, so the loop stops after step 1.
    """
    cfg = config or model.config
    was_training = model.training
    model.eval()
    raw = images.reshape(-1, 28, 28).to(next(model.parameters()).dtype)
    n = raw.shape[0]
    current = raw.clone()
    active = torch.arange(n)
    preds = torch.zeros(n, dtype=torch.long)
    rt = torch.zeros(n, dtype=torch.long)
    final_scores = raw.new_zeros(n, cfg.n_object_caps)
    traces = [InferenceTrace() for _ in range(n)] if record else None

    for t in range(1, cfg.max_global_steps + 1):
        x = current[active]
        result = model.step(x, record=record, config=cfg)
        scores = result.class_scores
        best = scores.argmax(dim=-1)
        entropy = entropy_confidence(scores, cfg.entropy_temperature)
        recon = model.decoder.decode(result.poses, best)
        if cfg.disable_spatial_mask:
            mask = torch.zeros_like(x, dtype=torch.bool)
            nxt = raw[active]
        else:
            mask, nxt = spatial_mask(recon, raw[active], cfg.mask_threshold)

        done = entropy < cfg.entropy_threshold
        if t == cfg.max_global_steps or cfg.disable_spatial_mask:
            done = torch.ones_like(done)

        preds[active] = best
        final_scores[active] = scores
        rt[active] = t
        if record:
            for k, i in enumerate(active.tolist()):
                traces[i].steps.append(
                    StepRecord(
                        recon[k],
                        mask[k],
                        nxt[k],
                        x[k],
                        scores[k],
                        float(entropy[k]),
                        [_slice_snapshot(s, k) for s in result.snapshots],
                    )
                )
        current[active] = nxt
        active = active[~done]
        if active.numel() == 0:
            break

    model.train(was_training)
    return BatchInference(preds, rt, final_scores, traces)


def infer(image: torch.Tensor, model, config: Optional[ModelConfig] = None):
    """Classify one 28x28 image. Returns (prediction, rt, trace)."""
    out = infer_batch(model, image.reshape(1, 28, 28), config, record=True)
    return int(out.predictions[0]), int(out.rt[0]), out.traces[0]
