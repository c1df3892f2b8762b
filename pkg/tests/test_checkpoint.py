import struct

import numpy as np
import pytest
import torch

from recon_attention import CNNBaseline, ModelConfig, ReconAttentionNet
from recon_attention.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint


def test_roundtrip_reproduces_scores(tmp_path, untrained):
    path = tmp_path / "m.ratn"
    save_checkpoint(untrained, path)
    torch.manual_seed(123)
    fresh = ReconAttentionNet(ModelConfig())
    load_checkpoint(fresh, path)
    x = torch.rand(2, 28, 28)
    with torch.no_grad():
        assert torch.equal(fresh(x), untrained(x))


def test_roundtrip_with_batchnorm_buffers(tmp_path):
    torch.manual_seed(0)
    net = CNNBaseline("resnet18")
    net.train()
    net(torch.rand(4, 28, 28))  # move running stats off their defaults
    save_checkpoint(net, tmp_path / "b.ratn")
    other = load_checkpoint(CNNBaseline("resnet18"), tmp_path / "b.ratn")
    for (k, a), (_, b) in zip(net.state_dict().items(), other.state_dict().items()):
        assert a.dtype == b.dtype and torch.equal(a, b), k


def test_hand_built_file_is_parsed(tmp_path):
    path = tmp_path / "h.ratn"
    values = np.arange(6, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", 1) + b"w" + struct.pack("<3I", 2, 2, 3) + values.tobytes())
    out = read_checkpoint(path)
    assert list(out) == ["w"]
    assert np.array_equal(out["w"], values.reshape(2, 3))


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ratn"
    path.write_bytes(b"NOPE!" + b"\0" * 16)
    with pytest.raises(CheckpointError, match="bad magic"):
        read_checkpoint(path)


def test_truncated_file(tmp_path, untrained):
    path = tmp_path / "t.ratn"
    save_checkpoint(untrained, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(path)


def test_architecture_mismatch(tmp_path):
    path = tmp_path / "c.ratn"
    save_checkpoint(CNNBaseline("conv2"), path)
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(ReconAttentionNet(ModelConfig()), path)
