"""Command-line entry point: ``privshield <subcommand> --config PATH [--out DIR] [--seed N]``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .data import ManifestError, generate_synthetic, write_manifest_dataset
from .metrics import CSV_COLUMNS, MetricsReport, project_2d
from .nets import SpecError, load_checkpoint
from .trainer import DivergenceError

log = logging.getLogger("privshield")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    out = Path(args.out) if args.out else Path(cfg.out)
    return cfg, out


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_generate(cfg: ExperimentConfig, out: Path) -> Path:
    if cfg.data.synth is None:
        raise ConfigError(["generate: data.synth must be set"])
    data = generate_synthetic(cfg.data.synth)
    manifest = write_manifest_dataset(data, out)
    log.info("wrote %d samples to %s", len(data), manifest)
    return manifest


def cmd_train(cfg: ExperimentConfig, out: Path, replicate: int = 0):
    splits = ex.make_splits(cfg, replicate)
    _write_config(cfg, out)
    result = ex.train_protector(cfg, splits, replicate, checkpoint_dir=out)
    log.info("trained %d steps; checkpoints in %s", len(result.history), out)
    return result


def cmd_attack(cfg: ExperimentConfig, checkpoint: Path, out: Path, replicate: int = 0) -> MetricsReport:
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise ConfigError([f"checkpoint not found: {checkpoint}"])
    enc = load_checkpoint(checkpoint)
    clf_path = checkpoint.with_name("f.ckpt")
    clf = load_checkpoint(clf_path) if clf_path.is_file() else None
    splits = ex.make_splits(cfg, replicate)
    want = (splits.test.images.shape[3],) + splits.test.images.shape[1:3]
    have = tuple(getattr(enc.spec, "in_shape", ()))
    if have != want:
        raise SpecError(f"encoder expects inputs of shape {have}, data has {want}")
    ev = ex.evaluate_encoder(cfg, enc, clf, splits, replicate, label=str(checkpoint.parent))
    ex.write_attack_artifacts(out, ev, splits.test, cfg.eval.grid_size)
    return ev.report


def cmd_sweep_lambda2(cfg: ExperimentConfig, lambda2s: Sequence[float], out: Path) -> list[dict]:
    if not lambda2s or any(not math.isfinite(v) or v < 0 for v in lambda2s):
        raise ConfigError(["--lambda2 needs one or more finite non-negative values"])
    _write_config(cfg, out)
    return ex.sweep_lambda2(cfg, lambda2s, out)


def cmd_sweep_layers(cfg: ExperimentConfig, taps: Sequence[str], out: Path) -> list[dict]:
    valid = [f"conv{i + 1}" for i in range(len(cfg.nets.widths))] + ["fc"]
    bad = [t for t in taps if t not in valid]
    if bad:
        raise ConfigError([f"invalid tap {t!r}; choose from {valid}" for t in bad])
    _write_config(cfg, out)
    return ex.sweep_layers(cfg, taps, out)


def _find_reports(run_dirs: Sequence[Path]) -> list[Path]:
    found = []
    for d in run_dirs:
        d = Path(d)
        hits = sorted(d.rglob("attack_metrics.json")) if d.is_dir() else []
        found.extend(hits or [d / "attack_metrics.json"])
    return found


def cmd_report(run_dirs: Sequence[Path], out: Path) -> tuple[list[MetricsReport], list[str]]:
    """Merge attack_metrics.json files; unreadable ones are listed as warnings."""
    from .plots import projection_plot, tradeoff_plot

    reports, warnings, sources = [], [], []
    for path in _find_reports(run_dirs):
        try:
            reports.append(MetricsReport.from_dict(json.loads(path.read_text(encoding="utf-8"))))
            sources.append(path)
        except (OSError, ValueError, TypeError) as exc:
            warnings.append(f"{path}: {exc}")
            log.warning("skipping %s: %s", path, exc)
    out.mkdir(parents=True, exist_ok=True)
    order = sorted(range(len(reports)), key=lambda i: (reports[i].config_hash, reports[i].label, str(sources[i])))
    reports = [reports[i] for i in order]
    sources = [sources[i] for i in order]
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS + ("source",))
        for rep, src in zip(reports, sources):
            w.writerow(rep.csv_row() + [str(src.parent)])
    merged = [{**rep.to_dict(), "source": str(src.parent)} for rep, src in zip(reports, sources)]
    (out / "report.json").write_text(json.dumps({"runs": merged, "warnings": warnings}, indent=2, sort_keys=True) + "\n")
    if reports:
        tradeoff_plot([r.face_sim for r in reports], [r.mean_mcc for r in reports],
                      [r.label or r.config_hash for r in reports], out / "tradeoff.png")
    for i, src in enumerate(sources):
        feats = src.parent / "features.npz"
        if feats.is_file():
            with np.load(feats) as npz:
                coords = project_2d(npz["features"])
                projection_plot(coords, npz["attributes"], out / f"projection_{i:03d}.png", title=str(src.parent))
    return reports, warnings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privshield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", type=str, default=None, help="experiment config (JSON or YAML)")
        p.add_argument("--out", type=str, default=None, help="output directory (defaults to config 'out')")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        return p

    common(sub.add_parser("generate", help="render the synthetic dataset to PNGs + manifest"))
    common(sub.add_parser("train", help="alternating adversarial training"))
    p = common(sub.add_parser("attack", help="black-box inversion and feature attacks on a checkpoint"))
    p.add_argument("--checkpoint", type=str, required=True, help="encoder checkpoint (enc.ckpt)")
    p = common(sub.add_parser("sweep-lambda2", help="utility/privacy tradeoff over lambda2"))
    p.add_argument("--lambda2", type=float, nargs="+", default=[0.0, 1.0, 5.0])
    p = common(sub.add_parser("sweep-layers", help="layer ablation over encoder taps"))
    p.add_argument("--taps", nargs="+", default=["conv1", "conv2", "conv3", "fc"])
    p = sub.add_parser("report", help="merge run directories into tables and plots")
    p.add_argument("runs", nargs="+", help="run directories containing attack_metrics.json")
    p.add_argument("--out", type=str, required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(ex.thread_budget())
    try:
        if args.command == "report":
            _, warnings = cmd_report([Path(r) for r in args.runs], Path(args.out))
            for w in warnings:
                print(f"warning: {w}", file=sys.stderr)
            return EXIT_OK
        cfg, out = _resolve(args)
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "attack":
            rep = cmd_attack(cfg, Path(args.checkpoint), out)
            print(rep.to_json())
        elif args.command == "sweep-lambda2":
            rows = cmd_sweep_lambda2(cfg, args.lambda2, out)
            print(json.dumps(rows, indent=2))
        elif args.command == "sweep-layers":
            rows = cmd_sweep_layers(cfg, args.taps, out)
            print(json.dumps(rows, indent=2))
    except (ConfigError, ManifestError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
