"""Alternating min-max training of encoder/classifier against a simulated decoder."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import losses
from .data import Dataset, batch_stream, derive_seed, to_tensor
from .losses import HyperParams
from .nets import (
    ClassifierSpec,
    DiscriminatorSpec,
    EncoderSpec,
    Perceptual,
    build,
    mirror_decoder_spec,
    save_checkpoint,
)

HISTORY_COLUMNS = (
    "step", "phase", "utility", "pixel", "perceptual", "gan_gen", "gan_disc", "objective",
)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, name: str):
        super().__init__(f"non-finite {name} loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    lr_enc: float = 1e-3
    lr_f: float = 1e-3
    lr_dec: float = 1e-3
    lr_disc: float = 1e-3
    batch_size: int = 32
    total_alternations: int = 1000
    dec_steps_per_alt: int = 1
    enc_steps_per_alt: int = 1
    seed: int = 0
    checkpoint_every: int = 0
    dec_data: str = "X1"  # data feeding the training-time decoder: "X1" or "X2"
    classifier_hidden: int = 64
    dec_input_norm: str = "none"  # "batch": training-time decoder z-scores Z, as the evaluation attacker does
    utility_attributes: Optional[list[int]] = None  # None -> all attributes

    def validate(self) -> None:
        for name in ("lr_enc", "lr_f", "lr_dec", "lr_disc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.dec_steps_per_alt < 1 or self.enc_steps_per_alt < 1:
            raise ValueError("batch size and steps per alternation must be positive")
        if self.total_alternations < 0 or self.checkpoint_every < 0:
            raise ValueError("total_alternations and checkpoint_every must be non-negative")
        if self.dec_input_norm not in ("none", "batch"):
            raise ValueError("dec_input_norm must be 'none' or 'batch'")
        if self.dec_data not in ("X1", "X2"):
            raise ValueError("dec_data must be 'X1' or 'X2'")


@dataclass
class TrainResult:
    enc: nn.Module
    clf: nn.Module
    dec: Optional[nn.Module]
    disc: Optional[nn.Module]
    history: list[dict]


def _adam(module: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam([p for p in module.parameters() if p.requires_grad], lr=lr)


def _finite(record: dict, step: int) -> None:
    for key, val in record.items():
        if isinstance(val, float) and not math.isfinite(val):
            raise DivergenceError(step, key)


def adversary_update_step(
    dec: nn.Module,
    enc: nn.Module,
    x: torch.Tensor,
    hp: HyperParams,
    dec_opt: torch.optim.Optimizer,
    disc: Optional[nn.Module] = None,
    disc_opt: Optional[torch.optim.Optimizer] = None,
    g: Optional[Perceptual] = None,
) -> dict:
    """One descent step for the decoder (and one ascent step for D when mu1 > 0).

    The encoder is queried under ``no_grad``; its parameters never see a gradient.
    """
    with torch.no_grad():
        z = enc(x)
    x_hat = dec(z)
    pixel = losses.pixel_recon_loss(x_hat, x)
    gen = perc = torch.zeros((), dtype=x.dtype)
    if hp.mu1 > 0:
        gen = losses.gan_generator_loss(disc(x_hat))
    if hp.mu2 > 0:
        perc = losses.perceptual_loss(g, x_hat, x)
    objective = losses.adversary_objective(hp, pixel, gen, perc)
    dec_opt.zero_grad(set_to_none=True)
    dec_params = [p for p in dec.parameters()]
    for p, grad in zip(dec_params, torch.autograd.grad(objective, dec_params)):
        p.grad = grad
    dec_opt.step()

    d_loss = float("nan")
    if hp.mu1 > 0:
        d_obj = losses.gan_discriminator_loss(disc(x), disc(x_hat.detach()))
        disc_opt.zero_grad(set_to_none=True)
        disc_params = list(disc.parameters())
        for p, grad in zip(disc_params, torch.autograd.grad(-d_obj, disc_params)):
            p.grad = grad
        disc_opt.step()
        d_loss = d_obj.item()
    return {
        "pixel": pixel.item(),
        "perceptual": perc.item(),
        "gan_gen": gen.item(),
        "gan_disc": d_loss,
        "objective": objective.item(),
    }


def protector_update_step(
    enc: nn.Module,
    clf: nn.Module,
    dec: Optional[nn.Module],
    x: torch.Tensor,
    y: torch.Tensor,
    hp: HyperParams,
    opt: torch.optim.Optimizer,
    g: Optional[Perceptual] = None,
) -> dict:
    """One descent step on utility - lambda1*pixel - lambda2*perceptual for (Enc, f).

    Gradients flow through the decoder into Z, but only encoder and classifier
    parameters are updated.
    """
    z = enc(x)
    utility = losses.utility_loss(clf(z), y)
    pixel = perc = torch.zeros((), dtype=x.dtype)
    if dec is not None and (hp.lambda1 > 0 or hp.lambda2 > 0):
        x_hat = dec(z)
        if hp.lambda1 > 0:
            pixel = losses.pixel_recon_loss(x_hat, x)
        if hp.lambda2 > 0:
            perc = losses.perceptual_loss(g, x_hat, x)
    objective = losses.protector_objective(hp, utility, pixel, perc)
    params = [p for group in opt.param_groups for p in group["params"]]
    opt.zero_grad(set_to_none=True)
    for p, grad in zip(params, torch.autograd.grad(objective, params)):
        p.grad = grad
    opt.step()
    return {
        "utility": utility.item(),
        "pixel": pixel.item(),
        "perceptual": perc.item(),
        "objective": objective.item(),
    }


def build_protector(enc_spec: EncoderSpec, k: int, cfg: TrainConfig):
    enc = build(enc_spec, derive_seed(cfg.seed, "enc"))
    clf = build(ClassifierSpec(enc_spec, cfg.classifier_hidden, k), derive_seed(cfg.seed, "f"))
    return enc, clf


def utility_labels(data: Dataset, attributes: Optional[list[int]]) -> np.ndarray:
    attrs = data.attributes if attributes is None else data.attributes[:, list(attributes)]
    return attrs.astype(np.float32)


def write_history(history: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for rec in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})


def alternate_train(
    cfg: TrainConfig,
    x1: Dataset,
    x2: Dataset,
    enc_spec: EncoderSpec,
    g: Optional[Perceptual] = None,
    checkpoint_dir: str | Path | None = None,
    adversary: bool = True,
) -> TrainResult:
    """Run ``total_alternations`` rounds of decoder updates then encoder updates.

    ``adversary=False`` drops the decoder entirely (plain utility training with
    the same seeds and batch order).
    """
    cfg.validate()
    if len(x1) == 0 or len(x2) == 0:
        raise ValueError("training splits must be nonempty")
    hp = cfg.hp
    if (hp.lambda2 > 0 or hp.mu2 > 0) and g is None:
        raise ValueError("perceptual terms need a feature extractor g")
    torch.manual_seed(derive_seed(cfg.seed, "torch"))
    y1 = utility_labels(x1, cfg.utility_attributes)
    enc, clf = build_protector(enc_spec, y1.shape[1], cfg)

    dec = disc = None
    if adversary:
        dec = build(mirror_decoder_spec(enc_spec, input_norm=cfg.dec_input_norm), derive_seed(cfg.seed, "dec"))
        dec_opt = _adam(dec, cfg.lr_dec)
        if hp.mu1 > 0:
            disc = build(DiscriminatorSpec(tuple(enc_spec.in_shape)), derive_seed(cfg.seed, "disc"))
            disc_opt = _adam(disc, cfg.lr_disc)
        else:
            disc_opt = None
    prot_opt = torch.optim.Adam(
        [{"params": list(enc.parameters()), "lr": cfg.lr_enc}, {"params": list(clf.parameters()), "lr": cfg.lr_f}]
    )

    dec_source = x1 if cfg.dec_data == "X1" else x2
    enc_batches = batch_stream(len(x1), cfg.batch_size, derive_seed(cfg.seed, "enc_batches"))
    dec_batches = batch_stream(len(dec_source), cfg.batch_size, derive_seed(cfg.seed, "dec_batches"))
    x1_t = to_tensor(x1.images)
    y1_t = torch.from_numpy(y1)
    dec_t = x1_t if dec_source is x1 else to_tensor(dec_source.images)

    ckpt_root = Path(checkpoint_dir) if checkpoint_dir is not None else None
    history: list[dict] = []
    step = 0
    for alt in range(cfg.total_alternations):
        if dec is not None:
            enc.eval()
            for _ in range(cfg.dec_steps_per_alt):
                idx = torch.from_numpy(next(dec_batches))
                rec = adversary_update_step(dec, enc, dec_t[idx], hp, dec_opt, disc, disc_opt, g)
                rec.update(step=step, phase="dec", utility=float("nan"))
                _finite({k: v for k, v in rec.items() if k not in ("gan_disc", "utility")}, step)
                history.append(rec)
                step += 1
            enc.train()
        for _ in range(cfg.enc_steps_per_alt):
            idx = torch.from_numpy(next(enc_batches))
            rec = protector_update_step(enc, clf, dec, x1_t[idx], y1_t[idx], hp, prot_opt, g)
            rec.update(step=step, phase="enc", gan_gen=float("nan"), gan_disc=float("nan"))
            _finite({k: v for k, v in rec.items() if k not in ("gan_gen", "gan_disc")}, step)
            history.append(rec)
            step += 1
        if ckpt_root is not None and cfg.checkpoint_every and (alt + 1) % cfg.checkpoint_every == 0:
            save_models(ckpt_root / f"step_{step}", enc, clf, dec, disc)
    if ckpt_root is not None:
        save_models(ckpt_root / "final", enc, clf, dec, disc)
        write_history(history, ckpt_root / "history.csv")
    return TrainResult(enc, clf, dec, disc, history)


def save_models(directory: Path, enc, clf, dec=None, disc=None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, model in (("enc", enc), ("f", clf), ("dec", dec), ("disc", disc)):
        if model is not None:
            save_checkpoint(model, directory / f"{name}.ckpt")
