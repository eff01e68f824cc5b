"""Evaluation-time adversaries: black-box model inversion and feature-level attacks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from . import losses
from .data import Dataset, batch_stream, derive_seed, to_numpy_images, to_tensor
from .losses import HyperParams
from .nets import (
    DecoderSpec,
    DiscriminatorSpec,
    MapperSpec,
    Perceptual,
    PrivateNet,
    PrivateSpec,
    SpecError,
    build,
)


class BlackBoxAccessError(PermissionError):
    pass


class BlackBoxEncoder:
    """Query-only view of an encoder.

    The wrapped callable lives in a closure; the object exposes no parameters
    or gradients. Attempts to read parameters are counted and refused.
    """

    __slots__ = ("_query", "queries", "param_accesses", "out_shape")

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], out_shape: tuple[int, ...]):
        def query(x: torch.Tensor) -> torch.Tensor:
            with torch.no_grad():
                return fn(x).detach().clone()

        self._query = query
        self.queries = 0
        self.param_accesses = 0
        self.out_shape = tuple(out_shape)

    @classmethod
    def from_module(cls, enc: nn.Module) -> "BlackBoxEncoder":
        return cls(enc, enc.out_shape)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        self.queries += 1
        return self._query(x)

    def _refuse(self, *args, **kwargs):
        self.param_accesses += 1
        raise BlackBoxAccessError("black-box encoder exposes no parameters")

    parameters = named_parameters = state_dict = _refuse

    def encode_all(self, images: np.ndarray, chunk: int = 256) -> torch.Tensor:
        out = [self(to_tensor(images[i:i + chunk])) for i in range(0, len(images), chunk)]
        return torch.cat(out)


@dataclass
class AttackConfig:
    mu1: float = 0.0
    mu2: float = 0.0
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    lr_disc: float = 1e-3
    seed: int = 0
    mapper_hidden: int = 128
    mapper_steps: int = 2000
    mapper_lr: float = 1e-3
    private_steps: int = 1500
    private_lr: float = 1e-3
    standardize: bool = True  # z-score queried features with the adversary's own statistics

    def __post_init__(self):
        HyperParams(mu1=self.mu1, mu2=self.mu2)  # validates weights
        if self.steps < 0 or self.mapper_steps < 0 or self.private_steps < 0:
            raise ValueError("attack budgets must be non-negative")

    @property
    def hp(self) -> HyperParams:
        return HyperParams(mu1=self.mu1, mu2=self.mu2)


class Standardize(nn.Module):
    """Fixed per-feature affine map fitted on the adversary's queried representations."""

    def __init__(self, z: torch.Tensor):
        super().__init__()
        self.register_buffer("mean", z.mean(dim=0, keepdim=True))
        self.register_buffer("std", z.std(dim=0, keepdim=True).clamp_min(1e-6))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.mean) / self.std


class AttackDecoder(nn.Module):
    def __init__(self, decoder: nn.Module, pre: nn.Module):
        super().__init__()
        self.pre = pre
        self.decoder = decoder
        self.spec = decoder.spec

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.pre(z))


@dataclass
class AttackResult:
    decoder: nn.Module
    discriminator: Optional[nn.Module]
    history: list[float] = field(default_factory=list)


def train_mi_attack(
    bb: BlackBoxEncoder,
    images: np.ndarray,
    cfg: AttackConfig,
    dec_spec: DecoderSpec,
    g: Optional[Perceptual] = None,
) -> AttackResult:
    """Train a fresh decoder on (X, bb(X)) pairs from the adversary's own data."""
    if tuple(dec_spec.in_shape) != tuple(bb.out_shape):
        raise SpecError(f"decoder input {dec_spec.in_shape} does not match encoder output {bb.out_shape}")
    h, w, c = np.asarray(images).shape[1:]
    if tuple(dec_spec.out_shape) != (c, h, w):
        raise SpecError(f"decoder output {dec_spec.out_shape} does not match images {(c, h, w)}")
    hp = cfg.hp
    if hp.mu2 > 0 and g is None:
        raise ValueError("mu2 > 0 needs a perceptual extractor")
    torch.manual_seed(derive_seed(cfg.seed, "attack-torch"))
    dec = build(dec_spec, derive_seed(cfg.seed, "attack-dec"))
    disc = None
    if hp.mu1 > 0:
        disc = build(DiscriminatorSpec(tuple(dec_spec.out_shape)), derive_seed(cfg.seed, "attack-disc"))
        disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
    x_all = to_tensor(images)
    z_all = bb.encode_all(images)
    dec = AttackDecoder(dec, Standardize(z_all) if cfg.standardize else nn.Identity())
    dec_opt = torch.optim.Adam(dec.decoder.parameters(), lr=cfg.lr)
    batches = batch_stream(len(images), cfg.batch_size, derive_seed(cfg.seed, "attack-batches"))
    history = []
    for _ in range(cfg.steps):
        idx = torch.from_numpy(next(batches))
        x, z = x_all[idx], z_all[idx]
        x_hat = dec(z)
        obj = losses.pixel_recon_loss(x_hat, x)
        if hp.mu1 > 0:
            obj = obj + hp.mu1 * losses.gan_generator_loss(disc(x_hat))
        if hp.mu2 > 0:
            obj = obj + hp.mu2 * losses.perceptual_loss(g, x_hat, x)
        dec_opt.zero_grad(set_to_none=True)
        obj.backward()
        dec_opt.step()
        if hp.mu1 > 0:
            d_obj = losses.gan_discriminator_loss(disc(x), disc(x_hat.detach()))
            disc_opt.zero_grad(set_to_none=True)
            (-d_obj).backward()
            disc_opt.step()
        history.append(obj.item())
    return AttackResult(dec, disc, history)


def run_mi_attack(dec: nn.Module, bb: BlackBoxEncoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Reconstruct every image from its black-box encoding; NHWC in [0, 1]."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            out.append(to_numpy_images(dec(bb(to_tensor(images[i:i + chunk])))))
    return np.concatenate(out) if out else np.zeros((0,) + np.asarray(images).shape[1:], np.float32)


def heldout_pixel_loss(dec: nn.Module, bb: BlackBoxEncoder, images: np.ndarray) -> float:
    x_hat = run_mi_attack(dec, bb, images)
    return float(((x_hat.astype(np.float64) - images) ** 2).reshape(len(images), -1).sum(1).mean())


def train_private_network(
    data: Dataset, cfg: AttackConfig, spec: Optional[PrivateSpec] = None
) -> PrivateNet:
    """Train the identity classifier C whose features define face/feature similarity."""
    if spec is None:
        c, h, w = data.image_shape[2], data.image_shape[0], data.image_shape[1]
        spec = PrivateSpec((c, h, w), data.n_identities)
    torch.manual_seed(derive_seed(cfg.seed, "private-torch"))
    net = build(spec, derive_seed(cfg.seed, "private"))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.private_lr)
    x_all = to_tensor(data.images)
    y_all = torch.from_numpy(np.array(data.identities))
    batches = batch_stream(len(data), cfg.batch_size, derive_seed(cfg.seed, "private-batches"))
    for _ in range(cfg.private_steps):
        idx = torch.from_numpy(next(batches))
        loss = losses.identity_loss(net(x_all[idx]), y_all[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    net.eval()
    net.requires_grad_(False)
    return net


def private_feature_matrix(c: PrivateNet, images: np.ndarray, tap: Optional[str] = None, chunk: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            out.append(c.features(to_tensor(images[i:i + chunk]), tap).double().numpy())
    return np.concatenate(out)


def train_feature_attack(
    bb: BlackBoxEncoder, c: PrivateNet, images: np.ndarray, cfg: AttackConfig, tap: Optional[str] = None
) -> nn.Module:
    """Fit a two-layer mapper M: Z -> C(X) by least squares on the adversary's data."""
    z_all = bb.encode_all(images).flatten(1)
    target = torch.from_numpy(private_feature_matrix(c, images, tap)).float()
    spec = MapperSpec(z_all.shape[1], target.shape[1], cfg.mapper_hidden)
    torch.manual_seed(derive_seed(cfg.seed, "mapper-torch"))
    core = build(spec, derive_seed(cfg.seed, "mapper"))
    opt = torch.optim.Adam(core.parameters(), lr=cfg.mapper_lr)
    mapper = nn.Sequential(Standardize(z_all) if cfg.standardize else nn.Identity(), core)
    batches = batch_stream(len(images), cfg.batch_size, derive_seed(cfg.seed, "mapper-batches"))
    for _ in range(cfg.mapper_steps):
        idx = torch.from_numpy(next(batches))
        loss = losses.feature_attack_loss(mapper(z_all[idx]), target[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return mapper


def feature_attack_outputs(mapper: nn.Module, bb: BlackBoxEncoder, images: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return mapper(bb.encode_all(images).flatten(1)).double().numpy()
