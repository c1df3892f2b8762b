"""Reconstruction-guided feature binding between feature and object capsules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import torch

SQUASH_EPS = 1e-8


def squash(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Rescale ``v`` along ``dim`` to norm |v|^2 / (1 + |v|^2), keeping its direction."""
    sq = (v * v).sum(dim=dim, keepdim=True)
    return v * (sq / (1.0 + sq) / torch.sqrt(sq + SQUASH_EPS))


def maxmin_normalize(m: torch.Tensor, dim: int = -1, lb: float = 0.0, ub: float = 1.0) -> torch.Tensor:
    """Affinely map ``m`` along ``dim`` onto [lb, ub].

    A slice with max == min carries no preference and maps to ``ub``.
    """
    if not lb < ub:
        raise ValueError(f"need lb < ub, got lb={lb}, ub={ub}")
    lo = m.amin(dim=dim, keepdim=True)
    hi = m.amax(dim=dim, keepdim=True)
    span = hi - lo
    flat = span == 0
    scaled = (m - lo) / torch.where(flat, torch.ones_like(span), span)
    out = lb + (ub - lb) * scaled
    return torch.where(flat, torch.full_like(out, ub), out)


def compute_votes(features: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Per-pair 8->16 predictions: (B, N, 8) x (N, J, 8, 16) -> (B, N, J, 16)."""
    if features.dim() != 3 or W.dim() != 4 or features.shape[1:] != (W.shape[0], W.shape[2]):
        raise ValueError(f"vote shape mismatch: features {tuple(features.shape)}, W {tuple(W.shape)}")
    return torch.einsum("bni,njio->bnjo", features, W)


class Decoder(Protocol):
    def decode_all(self, poses: torch.Tensor) -> torch.Tensor: ...


@dataclass
class RoutingSnapshot:
    """Routing quantities after one local iteration (iteration 0 is the initial state)."""

    iteration: int
    coefficients: torch.Tensor  # (B, N, J)
    agreement: torch.Tensor  # (B, N, J)
    recon_factor: torch.Tensor  # (B, N, J)
    scores_before: Optional[torch.Tensor] = None  # (B, J) norms of the poses this iteration
    recon_scores: Optional[torch.Tensor] = None  # (B, J) raw negative MSE per class
    scores_after: Optional[torch.Tensor] = None  # (B, J) norms with the updated coefficients


@dataclass
class RoutingResult:
    poses: torch.Tensor  # (B, J, 16)
    agreement: torch.Tensor
    recon_factor: torch.Tensor
    coefficients: torch.Tensor
    snapshots: list[RoutingSnapshot] = field(default_factory=list)

    @property
    def class_scores(self) -> torch.Tensor:
        return self.poses.norm(dim=-1)


def _weighted_poses(votes: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return squash((c.unsqueeze(-1) * votes).sum(dim=1))


def route(
    features: torch.Tensor,
    W: torch.Tensor,
    decoder: Decoder,
    target_image: torch.Tensor,
    iters: int = 3,
    binding_enabled: bool = True,
    lb: float = 0.0,
    ub: float = 1.0,
    floor: float = 0.5,
    record: bool = False,
    coefficients: Optional[torch.Tensor] = None,
) -> RoutingResult:
    """Route feature capsules to object capsules.

    The coefficients are computed without gradient; gradients reach ``W`` and
    the features only through the final coefficient-weighted vote sum. Passing
    ``coefficients`` skips the loop and uses them as given.
    """
    if iters < 1:
        raise ValueError("iters must be ≥ 1")
    votes = compute_votes(features, W)
    b, n, j, _ = votes.shape
    ones = votes.new_ones(b, n, j)
    a, r, c = ones, ones, ones
    snapshots = [RoutingSnapshot(0, c, a, r)] if record else []

    if coefficients is not None:
        c = coefficients.to(votes).expand(b, n, j)
    elif binding_enabled:
        target = target_image.reshape(b, -1)
        with torch.no_grad():
            v = votes.detach()
            for it in range(1, iters + 1):
                d = _weighted_poses(v, c)
                a = a + (v * d.unsqueeze(1)).sum(dim=-1)
                a = maxmin_normalize(a, dim=2, lb=lb, ub=ub).clamp(min=floor)
                recon = decoder.decode_all(d).reshape(b, j, -1)
                scores = -((recon - target.unsqueeze(1)) ** 2).mean(dim=-1)
                r = scores.unsqueeze(1).expand(b, n, j)
                r = maxmin_normalize(r, dim=2, lb=lb, ub=ub).clamp(min=floor)
                c = a * r
                if record:
                    snapshots.append(
                        RoutingSnapshot(
                            it,
                            c,
                            a,
                            r,
                            scores_before=d.norm(dim=-1),
                            recon_scores=scores,
                            scores_after=_weighted_poses(v, c).norm(dim=-1),
                        )
                    )

    poses = _weighted_poses(votes, c)
    return RoutingResult(poses, a, r, c, snapshots)
