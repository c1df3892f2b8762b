"""Model containers: the reconstruction-guided capsule network and the plain CNN baseline."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig, validate_config
from .decoder import ReconDecoder
from .encoder import BACKBONES, CapsuleEncoder, _check_images
from .routing import RoutingResult, route


class ReconAttentionNet(nn.Module):
    def __init__(self, config: ModelConfig, encoder: Optional[nn.Module] = None):
        super().__init__()
        self.config = config
        if encoder is None:
            validate_config(config)
            encoder = CapsuleEncoder(config.encoder_kind, config.feature_dim)
            if encoder.n_caps != config.n_feature_caps:
                raise ValueError(f"encoder yields {encoder.n_caps} capsules, config says {config.n_feature_caps}")
        self.encoder = encoder
        self.W = nn.Parameter(
            0.01 * torch.randn(config.n_feature_caps, config.n_object_caps, config.feature_dim, config.object_dim)
        )
        self.decoder = ReconDecoder(config.n_object_caps, config.object_dim, config.decoder_hidden)

    def step(
        self,
        images: torch.Tensor,
        target: Optional[torch.Tensor] = None,
        binding: Optional[bool] = None,
        record: bool = False,
        coefficients: Optional[torch.Tensor] = None,
        config: Optional[ModelConfig] = None,
    ) -> RoutingResult:
        """One encoder -> routing pass. ``target`` is what routing reconstructions are scored against.

        ``config`` overrides the inference-time settings (iterations, ablation flags).
        """
        cfg = config or self.config
        if binding is None:
            binding = not cfg.disable_feature_binding
        features = self.encoder(images)
        return route(
            features,
            self.W,
            self.decoder,
            images if target is None else target,
            iters=cfg.local_routing_iters,
            binding_enabled=binding,
            lb=cfg.maxmin_lb,
            ub=cfg.maxmin_ub,
            floor=cfg.routing_floor,
            record=record,
            coefficients=coefficients,
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Class scores (capsule norms) from a single global step."""
        return self.step(images).class_scores


class CNNBaseline(nn.Module):
    """Same backbone as the capsule model followed by a dense classifier head."""

    def __init__(self, kind: str = "conv2"):
        super().__init__()
        self.kind = kind
        self.backbone = BACKBONES[kind]()
        self.dropout1 = nn.Dropout(0.25)
        self.fc1 = nn.Linear(self.backbone.out_features, 128)
        self.dropout2 = nn.Dropout(0.5)
        self.fc2 = nn.Linear(128, 10)

    def forward(self, images):
        x = torch.flatten(self.backbone(_check_images(images)), 1)
        x = F.relu(self.fc1(self.dropout1(x)))
        return self.fc2(self.dropout2(x))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
