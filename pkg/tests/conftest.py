from __future__ import annotations

import gzip
import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from recon_attention import ModelConfig, ReconAttentionNet
from recon_attention.checkpoint import load_checkpoint, save_checkpoint
from recon_attention.config import MNIST_C_CORRUPTIONS
from recon_attention.data import load_digits_28
from recon_attention.routing import squash
from recon_attention.training import train

SRC = Path(__file__).resolve().parents[1] / "src" / "recon_attention"

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion():
    """Record a one-line acceptance verdict, printed in the terminal summary."""

    def record(name: str, passed, detail: str = ""):
        status = {True: "PASS", False: "FAIL"}.get(passed, str(passed))
        _CRITERIA.append((name, status, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _CRITERIA:
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


# --- file writers -----------------------------------------------------------


def write_idx(path: Path, array: np.ndarray, magic: int, compress=False):
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    payload = header + np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    if compress:
        with gzip.open(str(path) + ".gz", "wb") as f:
            f.write(payload)
    else:
        Path(path).write_bytes(payload)


def write_mnist_dir(root: Path, images: np.ndarray, labels: np.ndarray, n_test=None):
    root.mkdir(parents=True, exist_ok=True)
    pix = (np.clip(images, 0, 1) * 255).round().astype(np.uint8)
    n_test = n_test or len(images) // 5
    write_idx(root / "train-images-idx3-ubyte", pix[n_test:], 0x803)
    write_idx(root / "train-labels-idx1-ubyte", labels[n_test:], 0x801)
    write_idx(root / "t10k-images-idx3-ubyte", pix[:n_test], 0x803)
    write_idx(root / "t10k-labels-idx1-ubyte", labels[:n_test], 0x801)
    return root


def write_mnist_c_dir(root: Path, images: np.ndarray, labels: np.ndarray, names=MNIST_C_CORRUPTIONS, seed=0):
    """Release-style layout with crude stand-in corruptions (uint8, trailing channel axis)."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    for k, name in enumerate(names):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        if "noise" in name:
            x = images + rng.normal(0, 0.2, images.shape)
        elif "blur" in name or name == "fog":
            x = np.stack([gaussian_filter(im, 0.8) for im in images])
        else:
            x = np.roll(images, k % 3 - 1, axis=2)
        pix = (np.clip(x, 0, 1) * 255).round().astype(np.uint8)[..., None]
        np.save(d / "test_images.npy", pix)
        np.save(d / "test_labels.npy", labels.astype(np.int64))
    return root


# --- data and models --------------------------------------------------------


@pytest.fixture(scope="session")
def digits():
    return load_digits_28()


@pytest.fixture(scope="session")
def balanced_digits(digits):
    """1000 digit images, 100 per class, deterministic order."""
    x, y = digits
    idx = np.concatenate([np.flatnonzero(y == c)[:100] for c in range(10)])
    idx = np.random.default_rng(0).permutation(idx)
    return x[idx], y[idx]


@pytest.fixture
def untrained():
    torch.manual_seed(0)
    return ReconAttentionNet(ModelConfig()).eval()


class TinyEncoder(nn.Module):
    """Pooling + linear map to 8 feature capsules; small enough for finite differences."""

    def __init__(self, n_caps=8, dim=8):
        super().__init__()
        self.n_caps, self.dim = n_caps, dim
        self.fc = nn.Linear(49, n_caps * dim)

    def forward(self, x):
        x = nn.functional.avg_pool2d(x.reshape(-1, 1, 28, 28), 4).flatten(1)
        return squash(self.fc(x).view(-1, self.n_caps, self.dim))


MICRO_CONFIG = ModelConfig(n_feature_caps=8, decoder_hidden=(12, 16))


@pytest.fixture
def micro_model():
    torch.manual_seed(3)
    model = ReconAttentionNet(MICRO_CONFIG, encoder=TinyEncoder()).double()
    with torch.no_grad():
        model.W.mul_(30.0)  # votes large enough that routing does something
    return model


def _source_digest() -> str:
    h = hashlib.sha256()
    for name in ("routing.py", "encoder.py", "decoder.py", "model.py", "training.py"):
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


DESK_EPOCHS = 30


@pytest.fixture(scope="session")
def desk_model(request, digits):
    """Capsule model trained on 1400 digits (lr 1e-3, 30 epochs); the remainder is held out.

    Cached in the pytest cache keyed by the model/training source digest.
    """
    x, y = digits
    cfg = ModelConfig(initial_lr=0.001, max_epochs=DESK_EPOCHS)
    cache = Path(request.config.cache.mkdir("desk_model"))
    path = cache / f"{_source_digest()}.ratn"
    model = ReconAttentionNet(cfg)
    if path.exists():
        load_checkpoint(model, path)
    else:
        result = train(x[:1400], y[:1400], cfg, seed=0)
        model = result.model
        save_checkpoint(model, path)
    model.eval()
    return model, x[1400:], y[1400:]
