import csv
import os

import numpy as np
import pytest
import torch
from PIL import Image

from recon_attention import CNNBaseline, ModelConfig, ReconAttentionNet
from recon_attention.data import CorruptionDataset
from recon_attention.evaluation import (
    CorruptionReport,
    CorruptionResult,
    ReportError,
    evaluate,
    export_trace,
    read_report,
    read_summary,
    run_ablation,
    summarize,
    write_summary,
)


def _report(acc, rt=1.5, subset=("fog", "zigzag")):
    names = ["fog", "zigzag", "identity", "scale"]
    return CorruptionReport({n: CorruptionResult(a, rt, 100) for n, a in zip(names, acc)}, subset)


def _suite(x, y, names):
    return {n: CorruptionDataset(n, x, y) for n in names}


# --- reports --------------------------------------------------------------------


def test_report_aggregates():
    r = _report([0.8, 0.6, 1.0, 0.9])
    assert r.mnist_c_mean == pytest.approx(0.825)
    assert r.mnist_c_shape_mean == pytest.approx(0.7)
    assert r.mean_rt == 1.5


def test_report_csv_roundtrip(tmp_path):
    r = _report([0.8, 0.6, 1.0, 0.9])
    r.metadata["seed"] = "2"
    r.to_csv(tmp_path / "r.csv")
    back = read_report(tmp_path / "r.csv")
    assert back.rows == r.rows
    assert back.shape_subset == r.shape_subset
    assert back.metadata == {"seed": "2"}


def test_tampered_aggregate_rejected(tmp_path):
    _report([0.8, 0.6, 1.0, 0.9]).to_csv(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().replace("fog,0.8,", "fog,0.5,")
    (tmp_path / "r.csv").write_text(text)
    with pytest.raises(ReportError, match="average"):
        read_report(tmp_path / "r.csv")


def test_out_of_range_rows_rejected():
    with pytest.raises(ReportError):
        _report([1.2, 0.6, 1.0, 0.9]).check()
    with pytest.raises(ReportError):
        _report([0.5] * 4, rt=6.0).check(max_steps=5)


def test_text_table_lists_aggregates():
    text = _report([0.8, 0.6, 1.0, 0.9]).to_text()
    assert "MNIST-C-shape" in text and "70.00" in text and "82.50" in text


# --- evaluation runs ----------------------------------------------------------------


def test_untrained_models_score_chance(digits):
    # A single random init is biased towards a few classes, so chance is the
    # expectation over inits: average eight seeds on an exactly balanced set.
    x, y = digits
    idx = np.concatenate([np.flatnonzero(y == c)[:30] for c in range(10)])
    suite = _suite(x[idx], y[idx], ["identity"])
    accs = []
    for seed in range(8):
        torch.manual_seed(seed)
        model = ReconAttentionNet(ModelConfig()).eval()
        report = evaluate(model, suite, model.config.replace(max_global_steps=2))
        assert 1 <= report.rows["identity"].mean_rt <= 2
        accs.append(report.rows["identity"].accuracy)
    assert np.mean(accs) == pytest.approx(0.10, abs=0.02)


def test_ablation_arms(digits, untrained):
    x, y = digits[0][:12], digits[1][:12]
    reports = run_ablation(untrained, _suite(x, y, ["fog", "zigzag"]), untrained.config, metadata={"seed": "0"})
    assert list(reports) == ["full", "no_spatial_mask", "no_feature_binding", "neither"]
    assert reports["neither"].mean_rt == 1.0
    assert reports["no_spatial_mask"].mean_rt == 1.0
    assert reports["full"].metadata == {"seed": "0", "arm": "full", "config_hash": untrained.config.hash()}


def test_baseline_rt_is_one(digits):
    torch.manual_seed(0)
    base = CNNBaseline("conv2")
    report = evaluate(base, _suite(digits[0][:20], digits[1][:20], ["fog"]), ModelConfig())
    assert report.rows["fog"].mean_rt == 1.0


def test_capsule_count_mismatch(untrained, digits):
    cfg = ModelConfig(encoder_kind="resnet18", n_feature_caps=288)
    with pytest.raises(ValueError, match="1152"):
        evaluate(untrained, _suite(digits[0][:2], digits[1][:2], ["fog"]), cfg)


# --- summaries ------------------------------------------------------------------


def test_summary_mean_and_sample_sd(tmp_path):
    reports = [_report([a, 0.6, 1.0, 0.9]) for a in (0.7, 0.8, 0.9)]
    s = summarize(reports)
    assert s["fog"]["accuracy"].mean == pytest.approx(0.8)
    assert s["fog"]["accuracy"].sd == pytest.approx(0.1)
    assert s["mnist_c_mean"]["accuracy"].k == 3
    write_summary(s, tmp_path / "s.csv")
    back = read_summary(tmp_path / "s.csv")
    assert back["fog"]["accuracy"] == s["fog"]["accuracy"]
    assert back["mnist_c_shape_mean"]["mean_rt"] == s["mnist_c_shape_mean"]["mean_rt"]


def test_single_report_has_zero_sd():
    assert summarize([_report([0.5] * 4)])["fog"]["accuracy"].sd == 0.0


def test_summarize_needs_reports():
    with pytest.raises(ValueError):
        summarize([])


# --- trace export ---------------------------------------------------------------


def test_export_trace_layout(tmp_path, untrained, digits):
    cfg = untrained.config.replace(entropy_threshold=2.2)
    pred, rt, trace = export_trace(untrained, torch.from_numpy(digits[0][0]), cfg, tmp_path / "tr")
    root = tmp_path / "tr"
    steps = sorted(p.name for p in root.iterdir() if p.is_dir())
    assert steps == [f"step_{t}" for t in range(1, rt + 1)]
    with open(root / "summary.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == rt and int(rows[-1]["prediction"]) == pred
    for t in range(1, rt + 1):
        d = root / f"step_{t}"
        for name in ("input", "reconstruction", "mask", "masked_input"):
            img = Image.open(d / f"{name}.pgm")
            assert img.size == (28, 28) and img.mode == "L"
        first = np.loadtxt(d / "routing_iter_0.csv", delimiter=",")
        assert first.shape == (1152, 10) and np.all(first == 1.0)
        for k in (1, 2, 3):
            c = np.loadtxt(d / f"routing_iter_{k}.csv", delimiter=",")
            assert c.shape == (1152, 10) and c.min() >= 0.25 - 1e-6 and c.max() <= 1 + 1e-6
        with open(d / "scores.csv") as f:
            assert len(list(csv.DictReader(f))) == 30


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_export_trace_unwritable(tmp_path, untrained):
    locked = tmp_path / "locked"
    locked.mkdir(mode=0o500)
    with pytest.raises(OSError):
        export_trace(untrained, torch.rand(28, 28), untrained.config, locked / "tr")


def test_export_trace_path_is_a_file(tmp_path, untrained):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot create"):
        export_trace(untrained, torch.rand(28, 28), untrained.config, blocker / "tr")
