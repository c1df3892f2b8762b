"""Corruption-robustness evaluation, ablations, multi-seed summaries and trace export."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch
from PIL import Image

from .config import DEFAULT_SHAPE_SUBSET, ModelConfig
from .inference import infer
from .model import CNNBaseline

AGGREGATES = ("mnist_c_mean", "mnist_c_shape_mean")

ABLATION_ARMS = {
    "full": dict(disable_spatial_mask=False, disable_feature_binding=False),
    "no_spatial_mask": dict(disable_spatial_mask=True, disable_feature_binding=False),
    "no_feature_binding": dict(disable_spatial_mask=False, disable_feature_binding=True),
    "neither": dict(disable_spatial_mask=True, disable_feature_binding=True),
}


class ReportError(ValueError):
    pass


@dataclass
class CorruptionResult:
    accuracy: float
    mean_rt: float
    n: int


@dataclass
class CorruptionReport:
    rows: dict[str, CorruptionResult] = field(default_factory=dict)
    shape_subset: tuple[str, ...] = DEFAULT_SHAPE_SUBSET
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def mnist_c_mean(self) -> float:
        return _mean(r.accuracy for r in self.rows.values())

    @property
    def mnist_c_shape_mean(self) -> float:
        return _mean(self.rows[n].accuracy for n in self.shape_subset if n in self.rows)

    @property
    def mean_rt(self) -> float:
        return _mean(r.mean_rt for r in self.rows.values())

    @property
    def shape_mean_rt(self) -> float:
        return _mean(self.rows[n].mean_rt for n in self.shape_subset if n in self.rows)

    def check(self, max_steps: Optional[int] = None) -> None:
        for name, r in self.rows.items():
            if not 0.0 <= r.accuracy <= 1.0:
                raise ReportError(f"{name}: accuracy {r.accuracy} outside [0, 1]")
            if r.mean_rt < 1.0 or (max_steps is not None and r.mean_rt > max_steps):
                raise ReportError(f"{name}: mean_rt {r.mean_rt} outside [1, {max_steps}]")

    def to_csv(self, path: str | Path) -> None:
        self.check()
        with open(path, "w", newline="") as f:
            for key, value in self.metadata.items():
                f.write(f"# {key} = {value}\n")
            f.write(f"# shape_subset = {','.join(self.shape_subset)}\n")
            writer = csv.writer(f)
            writer.writerow(["corruption", "accuracy", "mean_rt", "n"])
            for name, r in self.rows.items():
                writer.writerow([name, repr(r.accuracy), repr(r.mean_rt), r.n])
            writer.writerow(["mnist_c_mean", repr(self.mnist_c_mean), repr(self.mean_rt), ""])
            writer.writerow(["mnist_c_shape_mean", repr(self.mnist_c_shape_mean), repr(self.shape_mean_rt), ""])
        # Re-read to confirm the aggregates recompute from the rows.
        read_report(path)

    def to_text(self) -> str:
        lines = [f"{'corruption':<16} {'accuracy':>9} {'mean_rt':>8}"]
        for name, r in self.rows.items():
            star = "*" if name in self.shape_subset else " "
            lines.append(f"{name:<15}{star} {100 * r.accuracy:9.2f} {r.mean_rt:8.3f}")
        lines.append("-" * 35)
        lines.append(f"{'MNIST-C':<16} {100 * self.mnist_c_mean:9.2f} {self.mean_rt:8.3f}")
        lines.append(f"{'MNIST-C-shape':<16} {100 * self.mnist_c_shape_mean:9.2f} {self.shape_mean_rt:8.3f}")
        lines.append("(* = member of MNIST-C-shape)")
        return "\n".join(lines) + "\n"


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


def read_report(path: str | Path, tol: float = 1e-9) -> CorruptionReport:
    """Parse a report CSV and verify that its aggregate rows match the per-corruption rows."""
    metadata, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            metadata[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    subset = tuple(s for s in metadata.pop("shape_subset", "").split(",") if s)
    report = CorruptionReport(shape_subset=subset, metadata=metadata)
    stored = {}
    for row in csv.DictReader(body):
        if row["corruption"] in AGGREGATES:
            stored[row["corruption"]] = float(row["accuracy"])
        else:
            report.rows[row["corruption"]] = CorruptionResult(float(row["accuracy"]), float(row["mean_rt"]), int(row["n"]))
    for name, value in stored.items():
        expected = getattr(report, name)
        if not (math.isnan(value) and math.isnan(expected)) and abs(value - expected) > tol:
            raise ReportError(f"{path}: {name} = {value} but rows average to {expected}")
    return report


def _check_compatible(model, config: ModelConfig) -> None:
    if isinstance(model, CNNBaseline):
        if model.kind != config.encoder_kind:
            raise ValueError(f"baseline backbone {model.kind} does not match config encoder {config.encoder_kind}")
        return
    n = model.W.shape[0]
    if n != config.n_feature_caps:
        raise ValueError(f"checkpoint has {n} feature capsules but config expects {config.n_feature_caps}")


@torch.no_grad()
def predict_with_rt(model, images: np.ndarray, config: ModelConfig, batch_size: int = 256):
    """Predictions and global-step counts for every image."""
    from .inference import infer_batch

    x = torch.as_tensor(images, dtype=torch.float32)
    preds, rts = [], []
    if isinstance(model, CNNBaseline):
        model.eval()
        for i in range(0, len(x), batch_size):
            preds.append(model(x[i : i + batch_size]).argmax(dim=-1))
        p = torch.cat(preds)
        return p.numpy(), np.ones(len(p), dtype=np.int64)
    for i in range(0, len(x), batch_size):
        out = infer_batch(model, x[i : i + batch_size], config)
        preds.append(out.predictions)
        rts.append(out.rt)
    return torch.cat(preds).numpy(), torch.cat(rts).numpy()


def evaluate(model, datasets: dict, config: ModelConfig, batch_size: int = 256,
             metadata: Optional[dict] = None, progress: Optional[Callable[[str, CorruptionResult], None]] = None) -> CorruptionReport:
    """Run inference over every image of every corruption set."""
    _check_compatible(model, config)
    report = CorruptionReport(shape_subset=tuple(config.shape_subset), metadata=dict(metadata or {}))
    report.metadata.setdefault("config_hash", config.hash())
    for name, ds in datasets.items():
        preds, rts = predict_with_rt(model, ds.images, config, batch_size)
        res = CorruptionResult(float(np.mean(preds == ds.labels)), float(np.mean(rts)), len(ds.labels))
        report.rows[name] = res
        if progress:
            progress(name, res)
    report.check(config.max_global_steps)
    return report


def run_ablation(model, datasets: dict, config: ModelConfig, arms: Iterable[str] = tuple(ABLATION_ARMS), **kwargs) -> dict:
    """Evaluate each ablation arm by toggling inference-time flags on the same trained model."""
    out = {}
    base_meta = dict(kwargs.pop("metadata", None) or {})
    for arm in arms:
        cfg = config.replace(**ABLATION_ARMS[arm])
        meta = {**base_meta, "arm": arm}
        out[arm] = evaluate(model, datasets, cfg, metadata=meta, **kwargs)
    return out


def threshold_sweep(model, datasets: dict, config: ModelConfig, thresholds: Iterable[float], **kwargs) -> dict:
    return {t: evaluate(model, datasets, config.replace(entropy_threshold=t), **kwargs) for t in thresholds}


@dataclass
class SummaryRow:
    mean: float
    sd: float
    k: int


def summarize(reports: list[CorruptionReport]) -> dict[str, dict[str, SummaryRow]]:
    """Mean and sample SD (ddof=1; 0 for a single run) of accuracy and mean_rt per row and aggregate."""
    if not reports:
        raise ValueError("no reports to summarize")

    def stat(values):
        values = np.asarray(values, dtype=float)
        sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        return SummaryRow(float(values.mean()), sd, len(values))

    out = {}
    for name in reports[0].rows:
        out[name] = {
            "accuracy": stat([r.rows[name].accuracy for r in reports]),
            "mean_rt": stat([r.rows[name].mean_rt for r in reports]),
        }
    out["mnist_c_mean"] = {"accuracy": stat([r.mnist_c_mean for r in reports]), "mean_rt": stat([r.mean_rt for r in reports])}
    out["mnist_c_shape_mean"] = {
        "accuracy": stat([r.mnist_c_shape_mean for r in reports]),
        "mean_rt": stat([r.shape_mean_rt for r in reports]),
    }
    return out


def write_summary(summary: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "accuracy_mean", "accuracy_sd", "mean_rt_mean", "mean_rt_sd", "k"])
        for name, s in summary.items():
            a, t = s["accuracy"], s["mean_rt"]
            writer.writerow([name, repr(a.mean), repr(a.sd), repr(t.mean), repr(t.sd), a.k])


def read_summary(path: str | Path) -> dict[str, dict[str, SummaryRow]]:
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            k = int(row["k"])
            out[row["row"]] = {
                "accuracy": SummaryRow(float(row["accuracy_mean"]), float(row["accuracy_sd"]), k),
                "mean_rt": SummaryRow(float(row["mean_rt_mean"]), float(row["mean_rt_sd"]), k),
            }
    return out


def checkpoint_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def _write_pgm(arr: torch.Tensor, path: Path) -> None:
    pixels = (arr.detach().float().clamp(0, 1).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, format="PPM")


def export_trace(model, image: torch.Tensor, config: ModelConfig, out_path: str | Path):
    """Write one image's inference trace as graymaps and CSVs.

    Layout::

        out_path/summary.csv                     step, prediction, entropy, class scores
        out_path/step_<t>/input.pgm              what step t encoded
        out_path/step_<t>/reconstruction.pgm     argmax-class reconstruction
        out_path/step_<t>/mask.pgm               boolean mask (255 inside)
        out_path/step_<t>/masked_input.pgm       input prepared for step t+1
        out_path/step_<t>/scores.csv             per local iteration and class
        out_path/step_<t>/routing_iter_<k>.csv   N_f rows x 10 coefficients; k = 0 is the initial state
    """
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create trace directory {out}: {exc}") from exc
    pred, rt, trace = infer(torch.as_tensor(image, dtype=torch.float32), model, config)
    with open(out / "summary.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "prediction", "entropy"] + [f"score_{j}" for j in range(10)])
        for t, s in enumerate(trace.steps, 1):
            writer.writerow([t, int(s.class_scores.argmax()), s.entropy] + [f"{v:.6g}" for v in s.class_scores.tolist()])
    for t, s in enumerate(trace.steps, 1):
        d = out / f"step_{t}"
        d.mkdir(exist_ok=True)
        _write_pgm(s.step_input, d / "input.pgm")
        _write_pgm(s.reconstruction, d / "reconstruction.pgm")
        _write_pgm(s.mask.float(), d / "mask.pgm")
        _write_pgm(s.masked_input, d / "masked_input.pgm")
        with open(d / "scores.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "class", "score_before", "recon_score", "score_after"])
            for snap in s.routing[1:]:
                for j in range(snap.recon_scores.shape[0]):
                    writer.writerow([snap.iteration, j, f"{float(snap.scores_before[j]):.6g}",
                                     f"{float(snap.recon_scores[j]):.6g}", f"{float(snap.scores_after[j]):.6g}"])
        for snap in s.routing:
            np.savetxt(d / f"routing_iter_{snap.iteration}.csv", snap.coefficients.numpy(), delimiter=",", fmt="%.6g")
    return pred, rt, trace
