"""Reconstruction-guided attention capsule network for robust digit recognition."""
from .config import ModelConfig, for_encoder, load_config, save_config, validate_config
from .inference import entropy_confidence, infer, infer_batch, spatial_mask
from .model import CNNBaseline, ReconAttentionNet
from .routing import compute_votes, maxmin_normalize, route, squash

__all__ = [
    "CNNBaseline",
    "ModelConfig",
    "ReconAttentionNet",
    "compute_votes",
    "entropy_confidence",
    "for_encoder",
    "infer",
    "infer_batch",
    "load_config",
    "maxmin_normalize",
    "route",
    "save_config",
    "spatial_mask",
    "squash",
    "validate_config",
]
