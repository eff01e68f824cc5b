"""End-to-end runs: data -> alternate training -> black-box attacks -> MetricsReport.

Replicate ``r`` of a config uses seeds derived from ``(config.seed, r)``, so
grid points of a sweep that share a replicate index see the same data split and
initial weights (paired comparison) while never sharing trained state.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .attacks import (
    BlackBoxEncoder,
    feature_attack_outputs,
    heldout_pixel_loss,
    private_feature_matrix,
    run_mi_attack,
    train_feature_attack,
    train_mi_attack,
    train_private_network,
)
from .config import ExperimentConfig, with_overrides
from .data import (
    Dataset,
    derive_seed,
    generate_synthetic,
    load_manifest,
    merge_datasets,
    split_dataset,
    to_tensor,
)
from .metrics import (
    MetricsReport,
    face_similarity,
    feature_similarity,
    lda_score,
    mean_psnr,
    mean_ssim,
    per_attribute_mcc,
)
from .nets import PerceptualSpec, PrivateSpec, build, default_encoder_spec, mirror_decoder_spec
from .trainer import TrainResult, alternate_train, utility_labels

log = logging.getLogger(__name__)


@dataclass
class Splits:
    x1: Dataset
    x2: Dataset
    test: Dataset


def thread_budget() -> int:
    try:
        return max(1, int(os.environ.get("PRIVSHIELD_THREADS", "1")))
    except ValueError:
        return 1


@functools.lru_cache(maxsize=8)
def _cached_synth(synth) -> Dataset:
    return generate_synthetic(synth)


def load_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    return _cached_synth(d.synth) if d.synth is not None else load_manifest(d.manifest)


def make_splits(cfg: ExperimentConfig, replicate: int = 0) -> Splits:
    data = load_data(cfg)
    seed = derive_seed(cfg.seed, "split", replicate)
    x1, x2, t = split_dataset(data, cfg.data.fractions, seed, cfg.data.identity_disjoint)
    splits = Splits(x1.data, x2.data, t.data)
    if cfg.data.extra_manifest:
        extra = load_manifest(cfg.data.extra_manifest)
        splits.x2 = merge_datasets(splits.x2, extra)
        if cfg.data.extra_to_x1:
            splits.x1 = merge_datasets(splits.x1, extra)
    return splits


def encoder_spec(cfg: ExperimentConfig, image_shape: Sequence[int]):
    h, w, c = image_shape
    if h != w:
        raise ValueError("only square images are supported")
    n = cfg.nets
    return default_encoder_spec(h, c, tuple(n.widths), n.latent_dim, n.tap, n.act)


def perceptual_net(cfg: ExperimentConfig, image_shape: Sequence[int]):
    h, w, c = image_shape
    spec = PerceptualSpec((c, h, w), tuple(cfg.nets.perceptual_channels))
    return build(spec, cfg.nets.perceptual_seed)


_PRIVATE_CACHE: dict[tuple, object] = {}


def private_net(cfg: ExperimentConfig, x2: Dataset, replicate: int):
    """Identity classifier C trained on X2; depends only on data and replicate seed."""
    h, w, c = x2.image_shape
    spec = PrivateSpec((c, h, w), x2.n_identities, hidden=cfg.nets.private_hidden, tap=cfg.nets.private_tap)
    acfg = with_overrides(cfg, attack={"seed": derive_seed(cfg.seed, "private", replicate)}).attack
    key = (x2.digest(), acfg.seed, acfg.private_steps, acfg.private_lr, acfg.batch_size, spec)
    if key not in _PRIVATE_CACHE:
        if len(_PRIVATE_CACHE) >= 16:
            _PRIVATE_CACHE.pop(next(iter(_PRIVATE_CACHE)))
        _PRIVATE_CACHE[key] = train_private_network(x2, acfg, spec)
    return _PRIVATE_CACHE[key]


def train_protector(cfg: ExperimentConfig, splits: Splits, replicate: int = 0,
                    checkpoint_dir: Optional[Path] = None) -> TrainResult:
    tcfg = with_overrides(cfg, train={"seed": derive_seed(cfg.seed, "train", replicate)}).train
    g = perceptual_net(cfg, splits.x1.image_shape)
    return alternate_train(tcfg, splits.x1, splits.x2, encoder_spec(cfg, splits.x1.image_shape), g, checkpoint_dir)


def utility_predictions(enc, clf, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            out.append(torch.sigmoid(clf(enc(to_tensor(images[i:i + chunk])))).double().numpy())
    return np.concatenate(out)


@dataclass
class Evaluation:
    report: MetricsReport
    reconstructions: np.ndarray
    features: np.ndarray  # encoder representation of the test set, flattened
    bb: BlackBoxEncoder


def evaluate_encoder(
    cfg: ExperimentConfig, enc, clf, splits: Splits, replicate: int = 0, label: str = ""
) -> Evaluation:
    """Attack ``enc`` through a black-box wrapper and compute every metric on the test split."""
    attack_cfg = with_overrides(cfg, attack={"seed": derive_seed(cfg.seed, "attack", replicate)}).attack
    test, x2 = splits.test, splits.x2
    g = perceptual_net(cfg, x2.image_shape)
    c_net = private_net(cfg, x2, replicate)

    if clf is not None:
        y = utility_labels(test, cfg.train.utility_attributes)
        per_attr = per_attribute_mcc(utility_predictions(enc, clf, test.images), y, cfg.eval.threshold)
        mmcc = float(np.mean(per_attr))
    else:
        per_attr, mmcc = [], float("nan")

    bb = BlackBoxEncoder.from_module(enc)
    dec_spec = mirror_decoder_spec(enc.spec)
    attack = train_mi_attack(bb, x2.images, attack_cfg, dec_spec, g)
    x_hat = run_mi_attack(attack.decoder, bb, test.images)
    face = face_similarity(private_feature_matrix(c_net, test.images), private_feature_matrix(c_net, x_hat))

    mapper = train_feature_attack(bb, c_net, x2.images, attack_cfg)
    feat = feature_similarity(feature_attack_outputs(mapper, bb, test.images),
                              private_feature_matrix(c_net, test.images))

    z = bb.encode_all(test.images).flatten(1).double().numpy()
    lda = lda_score(z, test.identities)
    report = MetricsReport(
        mean_mcc=mmcc,
        face_sim=face,
        feature_sim=feat,
        ssim=mean_ssim(test.images, x_hat),
        psnr=mean_psnr(test.images, x_hat),
        s_w=lda.s_w,
        s_b=lda.s_b,
        lda_score=lda.score,
        per_attribute_mcc=[float(v) for v in per_attr],
        config_hash=cfg.config_hash(),
        seed=replicate,
        attack_steps=attack_cfg.steps,
        mapper_steps=attack_cfg.mapper_steps,
        label=label,
        extra={
            "heldout_pixel_loss": heldout_pixel_loss(attack.decoder, bb, test.images),
            "encoder_queries": bb.queries,
            "encoder_param_accesses": bb.param_accesses,
            "private_steps": attack_cfg.private_steps,
            "lambda1": cfg.train.hp.lambda1,
            "lambda2": cfg.train.hp.lambda2,
            "mu1": attack_cfg.mu1,
            "mu2": attack_cfg.mu2,
            "tap": cfg.nets.tap,
            "feature_eval_split": "test",
        },
    )
    return Evaluation(report, x_hat, z, bb)


def run_experiment(cfg: ExperimentConfig, replicate: int = 0, out_dir: Optional[Path] = None,
                   label: str = "") -> MetricsReport:
    splits = make_splits(cfg, replicate)
    result = train_protector(cfg, splits, replicate)
    ev = evaluate_encoder(cfg, result.enc, result.clf, splits, replicate, label)
    if out_dir is not None:
        write_attack_artifacts(Path(out_dir), ev, splits.test, cfg.eval.grid_size)
    log.info("%s rep=%d mcc=%.3f face=%.3f feat=%.3f lda=%.3f", label, replicate, ev.report.mean_mcc,
             ev.report.face_sim, ev.report.feature_sim, ev.report.lda_score)
    return ev.report


# --- artifacts --------------------------------------------------------------


def save_grid(originals: np.ndarray, recons: np.ndarray, path: Path, n: int) -> int:
    """Two-row PNG: originals on top, reconstructions below. Returns image count."""
    from PIL import Image

    n = min(n, len(recons))
    if n == 0:
        return 0
    h, w, c = recons.shape[1:]
    canvas = np.ones((2 * h + 3, n * (w + 1) + 1, c), dtype=np.float32)
    for i in range(n):
        x0 = 1 + i * (w + 1)
        canvas[1:1 + h, x0:x0 + w] = originals[i]
        canvas[2 + h:2 + 2 * h, x0:x0 + w] = recons[i]
    arr = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr[..., 0] if c == 1 else arr).save(path)
    return n


def write_attack_artifacts(out: Path, ev: Evaluation, test: Dataset, grid_size: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    count = save_grid(test.images, ev.reconstructions, out / "recon_grid.png", grid_size)
    ev.report.extra["grid_count"] = count
    (out / "attack_metrics.json").write_text(ev.report.to_json() + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text(ev.report.to_csv(), encoding="utf-8")
    np.savez_compressed(out / "features.npz", features=ev.features.astype(np.float32),
                        attributes=test.attributes, identities=test.identities)


# --- sweeps -----------------------------------------------------------------


def _run_point(args):
    cfg, replicate, out_dir, label = args
    torch.set_num_threads(1)
    return run_experiment(cfg, replicate, out_dir, label)


def run_grid(points: list[tuple]) -> list[MetricsReport]:
    """Run (cfg, replicate, out_dir, label) points, in parallel when PRIVSHIELD_THREADS > 1."""
    workers = min(thread_budget(), len(points))
    if workers <= 1:
        return [run_experiment(*p) for p in points]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point, points))


def _agg(reports: list[MetricsReport], key: str) -> tuple[float, float, float]:
    vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
    return float(vals.mean()), float(vals.min()), float(vals.max())


LAMBDA2_COLUMNS = (
    "lambda2", "mean_mcc", "face_sim", "feature_sim", "ssim", "psnr",
    "mean_mcc_min", "mean_mcc_max", "face_sim_min", "face_sim_max",
    "feature_sim_min", "feature_sim_max", "n_seeds", "attack_steps", "config_hash",
)

LAYER_COLUMNS = (
    "tap", "variant", "face_sim", "mean_mcc", "s_w", "s_b", "lda_score",
    "face_sim_min", "face_sim_max", "lda_score_min", "lda_score_max", "n_seeds", "attack_steps", "config_hash",
)


def _write_rows(path: Path, columns, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def sweep_lambda2(cfg: ExperimentConfig, lambda2s: Sequence[float], out: Optional[Path] = None,
                  lambda1: float = 1.0, mu1: float = 0.0, mu2: float = 1.0) -> list[dict]:
    """Train+attack+evaluate per lambda2 with fixed lambda1/mu1/mu2; one aggregated row per lambda2."""
    if not lambda2s:
        raise ValueError("lambda2 list is empty")
    points = []
    for lam in lambda2s:
        # the training-time decoder uses the same loss weights as the attacker
        pcfg = with_overrides(cfg, train={"hp": {"lambda1": lambda1, "lambda2": float(lam), "mu1": mu1, "mu2": mu2}},
                              attack={"mu1": mu1, "mu2": mu2})
        for r in range(cfg.eval.seeds):
            run_dir = out / f"lambda2_{lam:g}" / f"seed_{r}" if out else None
            points.append((pcfg, r, run_dir, f"lambda2={lam:g}"))
    reports = run_grid(points)
    rows = []
    n = cfg.eval.seeds
    for i, lam in enumerate(lambda2s):
        group = reports[i * n:(i + 1) * n]
        row = {"lambda2": float(lam), "n_seeds": n, "attack_steps": group[0].attack_steps,
               "config_hash": group[0].config_hash}
        for key in ("mean_mcc", "face_sim", "feature_sim", "ssim", "psnr"):
            mean, lo, hi = _agg(group, key)
            row[key] = mean
            if key in ("mean_mcc", "face_sim", "feature_sim"):
                row[f"{key}_min"], row[f"{key}_max"] = lo, hi
        rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "lambda2_sweep.csv", LAMBDA2_COLUMNS, rows)
        from .plots import tradeoff_plot

        tradeoff_plot([r["face_sim"] for r in rows], [r["mean_mcc"] for r in rows],
                      [f"λ2={r['lambda2']:g}" for r in rows], out / "lambda2_tradeoff.png")
    return rows


def sweep_layers(cfg: ExperimentConfig, taps: Sequence[str], out: Optional[Path] = None,
                 adv_lambda1: float = 1.0) -> list[dict]:
    """Baseline (lambda1=0) and adversarial (lambda1=adv_lambda1) encoders per tap."""
    valid = [f"conv{i + 1}" for i in range(len(cfg.nets.widths))] + ["fc"]
    for tap in taps:
        if tap not in valid:
            raise ValueError(f"invalid tap {tap!r}; choose from {valid}")
    points, keys = [], []
    for tap in taps:
        for variant, lam in (("base", 0.0), ("adv", adv_lambda1)):
            pcfg = with_overrides(cfg, nets={"tap": tap}, train={"hp": {"lambda1": lam}})
            for r in range(cfg.eval.seeds):
                run_dir = out / f"tap_{tap}" / variant / f"seed_{r}" if out else None
                points.append((pcfg, r, run_dir, f"{tap}/{variant}"))
            keys.append((tap, variant))
    reports = run_grid(points)
    n = cfg.eval.seeds
    rows = []
    for i, (tap, variant) in enumerate(keys):
        group = reports[i * n:(i + 1) * n]
        row = {"tap": tap, "variant": variant, "n_seeds": n, "attack_steps": group[0].attack_steps,
               "config_hash": group[0].config_hash}
        for key in ("face_sim", "mean_mcc", "s_w", "s_b", "lda_score"):
            mean, lo, hi = _agg(group, key)
            row[key] = mean
            if key in ("face_sim", "lda_score"):
                row[f"{key}_min"], row[f"{key}_max"] = lo, hi
        rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "layers_sweep.csv", LAYER_COLUMNS, rows)
    return rows
