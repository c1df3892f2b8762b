"""Fully-connected reconstruction decoder conditioned on one object capsule."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class ReconDecoder(nn.Module):
    """Three dense layers, 160 -> 512 -> 1024 -> 784, ReLU then sigmoid.

    The input is all object capsules concatenated with every capsule except
    the selected class zeroed.
    """

    def __init__(self, n_caps: int = 10, dim: int = 16, hidden=(512, 1024)):
        super().__init__()
        self.n_caps = n_caps
        self.dim = dim
        self.fc1 = nn.Linear(n_caps * dim, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], 784)

    def _tail(self, h):
        return torch.sigmoid(self.fc3(F.relu(self.fc2(F.relu(h)))))

    def forward(self, masked: torch.Tensor) -> torch.Tensor:
        return self._tail(self.fc1(masked)).view(-1, 28, 28)

    def decode(self, poses: torch.Tensor, class_idx) -> torch.Tensor:
        """Reconstruct from ``poses`` (B, 10, 16) keeping only ``class_idx`` (int or (B,) tensor)."""
        b = poses.shape[0]
        idx = torch.as_tensor(class_idx, device=poses.device).long().expand(b)
        if ((idx < 0) | (idx >= self.n_caps)).any():
            raise IndexError(f"class index out of range [0, {self.n_caps})")
        keep = F.one_hot(idx, self.n_caps).to(poses.dtype).unsqueeze(-1)
        return self((poses * keep).reshape(b, -1))

    def decode_all(self, poses: torch.Tensor) -> torch.Tensor:
        """Reconstructions for every class hypothesis at once, shape (B, 10, 28, 28)."""
        b = poses.shape[0]
        w1 = self.fc1.weight.view(-1, self.n_caps, self.dim)
        h = torch.einsum("bjk,hjk->bjh", poses, w1) + self.fc1.bias
        return self._tail(h).view(b, self.n_caps, 28, 28)


def decode(poses: torch.Tensor, class_idx, decoder: ReconDecoder) -> torch.Tensor:
    return decoder.decode(poses, class_idx)


def reconstruction_score(reconstruction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Negative per-image mean squared error over the trailing 28x28 pixels."""
    return -((reconstruction - target) ** 2).mean(dim=(-2, -1))
