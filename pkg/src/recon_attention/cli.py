"""Command-line driver: train, train-baseline, eval, ablate, trace, freq-eval, reproduce.

Run directories hold one ``seed_<k>`` subdirectory per training run with
``config.cfg``, a checkpoint (``checkpoint.ratn`` for the capsule model,
``baseline.ratn`` for the CNN), ``train_log.csv`` and evaluation reports.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

import torch

from . import data as data_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import FEATURE_CAPS, ModelConfig, load_config, save_config, validate_config
from .evaluation import (
    ABLATION_ARMS,
    checkpoint_id,
    evaluate,
    export_trace,
    run_ablation,
    summarize,
    threshold_sweep,
    write_summary,
)
from .model import CNNBaseline, ReconAttentionNet
from .training import train, train_baseline

log = logging.getLogger("recon_attention")

DATA_ENV = "RECON_ATTN_DATA"
CAPSULE_CKPT = "checkpoint.ratn"
BASELINE_CKPT = "baseline.ratn"


def data_root(config: ModelConfig) -> Path:
    return Path(os.environ.get(DATA_ENV) or config.data_root)


def load_training_data(config: ModelConfig, dataset: str = "mnist"):
    if dataset == "digits":
        return data_mod.load_digits_28()
    (x, y), _ = data_mod.load_mnist(data_root(config) / "mnist")
    return x, y


def load_corruptions(config: ModelConfig, root=None):
    root = Path(root) if root else data_root(config) / "mnist_c"
    suite = data_mod.load_mnist_c(root)
    if suite.missing:
        log.warning("missing MNIST-C corruptions: %s", ", ".join(suite.missing))
    return suite


def seed_dirs(run_dir: Path) -> list[Path]:
    dirs = sorted(p for p in Path(run_dir).glob("seed_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no seed_* runs under {run_dir}")
    return dirs


def load_run(seed_dir: Path):
    """(model, config) from a seed directory."""
    seed_dir = Path(seed_dir)
    config = load_config(seed_dir / "config.cfg")
    if (seed_dir / CAPSULE_CKPT).exists():
        path, model = seed_dir / CAPSULE_CKPT, ReconAttentionNet(config)
    else:
        path, model = seed_dir / BASELINE_CKPT, CNNBaseline(config.encoder_kind)
    load_checkpoint(model, path)
    model.eval()
    return model, config, path


def train_runs(config: ModelConfig, out: Path, seeds, baseline=False, dataset="mnist", lr=None, max_epochs=None):
    x, y = load_training_data(config, dataset)
    for seed in seeds:
        d = out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        log.info("training %s seed %d -> %s", "baseline" if baseline else "capsule model", seed, d)
        fit = train_baseline if baseline else train
        result = fit(x, y, config, seed, lr=lr, max_epochs=max_epochs)
        used = config.fallback_lr if result.fell_back else result.initial_lr
        save_config(config.replace(initial_lr=used), d / "config.cfg")
        save_checkpoint(result.model, d / (BASELINE_CKPT if baseline else CAPSULE_CKPT))
        result.write_log(d / "train_log.csv")
        log.info("seed %d: best val %.4f at epoch %d (lr %g)", seed, result.best_val_accuracy, result.best_epoch, used)


def eval_runs(out: Path, corruptions, config_override=None, batch_size=256):
    reports = []
    for d in seed_dirs(out):
        model, config, ckpt = load_run(d)
        if config_override:
            config = config.replace(**config_override)
        meta = {"seed": d.name.split("_", 1)[1], "checkpoint_id": checkpoint_id(ckpt)}
        report = evaluate(model, corruptions, config, batch_size=batch_size, metadata=meta,
                          progress=lambda n, r: log.info("%s: acc %.4f rt %.3f", n, r.accuracy, r.mean_rt))
        report.to_csv(d / "report.csv")
        (d / "report.txt").write_text(report.to_text())
        print(f"[{out.name}/{d.name}]\n{report.to_text()}")
        reports.append(report)
    write_summary(summarize(reports), out / "summary.csv")
    return reports


def ablate_runs(out: Path, corruptions, batch_size=256):
    per_arm = {arm: [] for arm in ABLATION_ARMS}
    for d in seed_dirs(out):
        model, config, ckpt = load_run(d)
        (d / "ablation").mkdir(exist_ok=True)
        meta = {"seed": d.name.split("_", 1)[1], "checkpoint_id": checkpoint_id(ckpt)}
        for arm, report in run_ablation(model, corruptions, config, batch_size=batch_size, metadata=meta).items():
            report.to_csv(d / "ablation" / f"{arm}.csv")
            per_arm[arm].append(report)
            print(f"[{out.name}/{d.name} {arm}] MNIST-C {100 * report.mnist_c_mean:.2f} "
                  f"shape {100 * report.mnist_c_shape_mean:.2f} rt {report.mean_rt:.3f}")
    for arm, reports in per_arm.items():
        write_summary(summarize(reports), out / f"ablation_{arm}_summary.csv")
    return per_arm


def _base_config(args) -> ModelConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ModelConfig()
    changes = {}
    if getattr(args, "encoder", None):
        changes.update(encoder_kind=args.encoder, n_feature_caps=FEATURE_CAPS[args.encoder])
    for key in ("recon_target_mode", "data_root", "out_dir", "seeds", "max_epochs"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    return validate_config(config.replace(**changes))


def _seeds(config: ModelConfig, offset: int) -> range:
    return range(offset, offset + config.seeds)


def cmd_train(args, baseline=False):
    config = _base_config(args)
    prefix = "cnn_" if baseline else "ours_"
    out = Path(args.run_dir or Path(config.out_dir) / f"{prefix}{config.encoder_kind}")
    train_runs(config, out, _seeds(config, args.seed_offset), baseline, args.dataset, args.lr, args.max_epochs)
    return 0


def cmd_eval(args):
    out = Path(args.run_dir)
    model, config, _ = load_run(seed_dirs(out)[0])
    corruptions = load_corruptions(config, args.mnist_c)
    if args.thresholds:
        thresholds = [float(t) for t in args.thresholds.split(",")]
        for d in seed_dirs(out):
            model, config, _ = load_run(d)
            for t, report in threshold_sweep(model, corruptions, config, thresholds, batch_size=args.batch_size).items():
                report.to_csv(d / f"report_eta_{t:g}.csv")
                print(f"[{d.name} eta={t:g}] MNIST-C {100 * report.mnist_c_mean:.2f} rt {report.mean_rt:.3f}")
        return 0
    eval_runs(out, corruptions, batch_size=args.batch_size)
    return 0


def cmd_ablate(args):
    out = Path(args.run_dir)
    _, config, _ = load_run(seed_dirs(out)[0])
    ablate_runs(out, load_corruptions(config, args.mnist_c), args.batch_size)
    return 0


def cmd_trace(args):
    model, config, _ = load_run(Path(args.seed_dir))
    if args.corruption:
        ds = load_corruptions(config, args.mnist_c)[args.corruption]
        image, label = ds.images[args.index], int(ds.labels[args.index])
    elif args.dataset == "digits":
        x, y = data_mod.load_digits_28()
        image, label = x[args.index], int(y[args.index])
    else:
        _, (x, y) = data_mod.load_mnist(data_root(config) / "mnist")
        image, label = x[args.index], int(y[args.index])
    pred, rt, _ = export_trace(model, torch.as_tensor(image), config, args.out)
    print(f"label {label} prediction {pred} rt {rt} -> {args.out}")
    return 0


def cmd_freq_eval(args):
    base = _base_config(args)
    root = Path(args.run_dir or Path(base.out_dir) / "freq")
    corruptions = None if args.skip_eval else load_corruptions(base, args.mnist_c)
    for mode in ("full_spectrum", "low_freq", "high_freq"):
        config = base.replace(recon_target_mode=mode)
        out = root / mode
        train_runs(config, out, _seeds(config, args.seed_offset), False, args.dataset, args.lr, args.max_epochs)
        if corruptions is not None:
            eval_runs(out, corruptions, batch_size=args.batch_size)
    return 0


def cmd_reproduce(args):
    """Train and evaluate every arm the acceptance suite reads, under ``out_dir``."""
    if args.seeds is None:
        args.seeds = 3
    base = _base_config(args)
    root = Path(base.out_dir)
    corruptions = load_corruptions(base, args.mnist_c)
    encoders = ["conv2"] + (["resnet18"] if args.with_resnet else [])
    for kind in encoders:
        config = base.replace(encoder_kind=kind, n_feature_caps=FEATURE_CAPS[kind], recon_target_mode="low_freq")
        seeds = _seeds(config, args.seed_offset)
        ours, cnn = root / f"ours_{kind}", root / f"cnn_{kind}"
        train_runs(config, ours, seeds, False, args.dataset, args.lr, args.max_epochs)
        eval_runs(ours, corruptions, batch_size=args.batch_size)
        ablate_runs(ours, corruptions, args.batch_size)
        train_runs(config, cnn, seeds, True, args.dataset, args.lr, args.max_epochs)
        eval_runs(cnn, corruptions, batch_size=args.batch_size)
    for mode in ("full_spectrum", "low_freq", "high_freq"):
        config = base.replace(encoder_kind="conv2", n_feature_caps=FEATURE_CAPS["conv2"], recon_target_mode=mode, seeds=1)
        out = root / "freq" / mode
        first = root / "ours_conv2" / f"seed_{args.seed_offset}"
        if mode == "low_freq" and (first / CAPSULE_CKPT).exists():
            # Same configuration as the main conv2 run; reuse its first seed.
            shutil.copytree(first, out / first.name, dirs_exist_ok=True)
            eval_runs(out, corruptions, batch_size=args.batch_size)
            continue
        train_runs(config, out, _seeds(config, args.seed_offset), False, args.dataset, args.lr, args.max_epochs)
        eval_runs(out, corruptions, batch_size=args.batch_size)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recon-attn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def training_opts(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--encoder", choices=["conv2", "resnet18"])
        p.add_argument("--recon-target", dest="recon_target_mode", choices=["full_spectrum", "low_freq", "high_freq"])
        p.add_argument("--seeds", type=int, help="number of independent trainings")
        p.add_argument("--seed-offset", type=int, default=0)
        p.add_argument("--lr", type=float, help="override the initial learning rate")
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--data-root")
        p.add_argument("--out-dir")
        p.add_argument("--dataset", choices=["mnist", "digits"], default="mnist",
                       help="'digits' trains on scikit-learn's bundled digits (desk-scale smoke runs)")
        p.add_argument("--run-dir", help="where seed_* directories are written")

    def eval_opts(p):
        p.add_argument("run_dir", help="directory containing seed_* runs")
        p.add_argument("--mnist-c", help="MNIST-C root (default <data_root>/mnist_c)")
        p.add_argument("--batch-size", type=int, default=256)

    p = sub.add_parser("train", help="train the capsule model")
    training_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-baseline", help="train the CNN baseline")
    training_opts(p)
    p.set_defaults(func=lambda a: cmd_train(a, baseline=True))

    p = sub.add_parser("eval", help="evaluate every seed on MNIST-C")
    eval_opts(p)
    p.add_argument("--thresholds", help="comma-separated entropy thresholds to sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="inference-time ablation arms")
    eval_opts(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("trace", help="export one image's inference trace")
    p.add_argument("seed_dir")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--corruption", help="take the image from this MNIST-C corruption")
    p.add_argument("--mnist-c")
    p.add_argument("--dataset", choices=["mnist", "digits"], default="mnist")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("freq-eval", help="train and evaluate the three reconstruction-target modes")
    training_opts(p)
    p.add_argument("--mnist-c")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--skip-eval", action="store_true")
    p.set_defaults(func=cmd_freq_eval)

    p = sub.add_parser("reproduce", help="produce every result the acceptance suite checks")
    training_opts(p)
    p.add_argument("--mnist-c")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--with-resnet", action="store_true")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.verbose:
        log.setLevel(logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
