"""Network specs, builders, forward maps and the checkpoint format.

Every network is a ``torch.nn.Module`` built from a frozen dataclass spec and a
seed. Initialization is fan-in-scaled uniform: weights ~ U(-b, b) with
``b = sqrt(6 / fan_in)``, biases zero.

Checkpoints are ``.npz`` containers: one little-endian float32 array per
parameter name plus ``__spec__`` (UTF-8 JSON of the spec, kind and init seed).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

ACTIVATIONS = ("elu", "relu", "lrelu", "tanh", "none")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str  # "conv" or "fc"
    out: int
    stride: int = 2
    act: str = "elu"


@dataclass(frozen=True)
class EncoderSpec:
    in_shape: tuple[int, int, int]  # C, H, W
    stages: tuple[Stage, ...]
    tap: str

    @property
    def stage_names(self) -> list[str]:
        return [s.name for s in self.stages]

    @property
    def tap_index(self) -> int:
        return self.stage_names.index(self.tap)

    @property
    def latent_dim(self) -> int | None:
        last = self.stages[self.tap_index]
        return last.out if last.kind == "fc" else None

    def with_tap(self, tap: str) -> "EncoderSpec":
        return EncoderSpec(self.in_shape, self.stages, tap)

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after every stage (no batch dim)."""
        shape: tuple[int, ...] = tuple(self.in_shape)
        out = []
        for st in self.stages:
            shape = _stage_out_shape(st, shape)
            out.append(shape)
        return out

    def validate(self) -> None:
        names = self.stage_names
        if len(set(names)) != len(names):
            raise SpecError("duplicate stage names")
        if self.tap not in names:
            raise SpecError(f"tap {self.tap!r} is not a stage of the encoder ({names})")
        for st in self.stages:
            if st.act not in ACTIVATIONS:
                raise SpecError(f"unknown activation {st.act!r}")
        self.shapes()


@dataclass(frozen=True)
class DecoderStage:
    kind: str  # "fc" or "upconv"
    in_size: int
    out_size: int
    scale: int = 1
    act: str = "elu"
    reshape: tuple[int, ...] | None = None  # for fc: output reshaped to this


@dataclass(frozen=True)
class DecoderSpec:
    in_shape: tuple[int, ...]
    out_shape: tuple[int, int, int]
    stages: tuple[DecoderStage, ...]
    input_norm: str = "none"  # "batch": z-score every input feature with batch statistics


@dataclass(frozen=True)
class ClassifierSpec:
    """Remaining encoder stages after the tap, then two fully connected layers."""

    encoder: EncoderSpec
    hidden: int
    k: int


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_shape: tuple[int, int, int]
    channels: tuple[int, ...] = (16, 32, 64)


@dataclass(frozen=True)
class PerceptualSpec:
    in_shape: tuple[int, int, int]
    channels: tuple[int, ...] = (8, 16, 32)
    taps: tuple[int, ...] = (0, 1, 2)
    act: str = "elu"


@dataclass(frozen=True)
class PrivateSpec:
    """Identity classifier C; ``tap`` selects the stage whose output is the deep feature."""

    in_shape: tuple[int, int, int]
    n_classes: int
    channels: tuple[int, ...] = (16, 32, 64)
    hidden: int = 64
    tap: str = "hidden"


@dataclass(frozen=True)
class MapperSpec:
    in_dim: int
    out_dim: int
    hidden: int = 128


SPEC_KINDS = {
    "encoder": EncoderSpec,
    "decoder": DecoderSpec,
    "classifier": ClassifierSpec,
    "discriminator": DiscriminatorSpec,
    "perceptual": PerceptualSpec,
    "private": PrivateSpec,
    "mapper": MapperSpec,
}


def _stage_out_shape(st: Stage, shape: tuple[int, ...]) -> tuple[int, ...]:
    if st.out < 1:
        raise SpecError(f"stage {st.name}: output size must be positive")
    if st.kind == "conv":
        if len(shape) != 3:
            raise SpecError(f"stage {st.name}: conv after a flattened stage")
        _, h, w = shape
        h2, w2 = (h - 1) // st.stride + 1, (w - 1) // st.stride + 1
        if h % st.stride or w % st.stride or h2 < 1:
            raise SpecError(f"stage {st.name}: spatial size {h}x{w} not divisible by stride {st.stride}")
        return (st.out, h2, w2)
    if st.kind == "fc":
        return (st.out,)
    raise SpecError(f"stage {st.name}: unknown kind {st.kind!r}")


def default_encoder_spec(
    image_size: int = 32, channels: int = 3, widths: Sequence[int] = (16, 32, 64),
    latent_dim: int = 64, tap: str = "fc", act: str = "elu",
) -> EncoderSpec:
    """Three stride-2 conv stages followed by a linear ``fc`` stage."""
    stages = [Stage(f"conv{i + 1}", "conv", w, 2, act) for i, w in enumerate(widths)]
    stages.append(Stage("fc", "fc", latent_dim, 1, "none"))
    spec = EncoderSpec((channels, image_size, image_size), tuple(stages), tap)
    spec.validate()
    return spec


def mirror_decoder_spec(encoder: EncoderSpec, tap: str | None = None, input_norm: str = "none") -> DecoderSpec:
    """Reverse the encoder from the tap down to the image, up-sampling in place of strides."""
    encoder = encoder.with_tap(tap or encoder.tap)
    encoder.validate()
    shapes = [tuple(encoder.in_shape)] + encoder.shapes()
    idx = encoder.tap_index
    stages = []
    for i in range(idx, -1, -1):
        st = encoder.stages[i]
        src, dst = shapes[i + 1], shapes[i]
        act = "sigmoid" if i == 0 else st.act if st.act != "none" else "elu"
        if st.kind == "fc":
            stages.append(DecoderStage("fc", int(np.prod(src)), int(np.prod(dst)), 1, act, tuple(dst)))
        else:
            stages.append(DecoderStage("upconv", src[0], dst[0], st.stride, act))
    if input_norm not in ("none", "batch"):
        raise SpecError(f"unknown decoder input_norm {input_norm!r}")
    return DecoderSpec(tuple(shapes[idx + 1]), tuple(encoder.in_shape), tuple(stages), input_norm)


# --- modules ----------------------------------------------------------------


def _act(name: str) -> nn.Module:
    return {
        "elu": nn.ELU(),
        "relu": nn.ReLU(),
        "lrelu": nn.LeakyReLU(0.2),
        "tanh": nn.Tanh(),
        "sigmoid": nn.Sigmoid(),
        "none": nn.Identity(),
    }[name]


def _stage_module(st: Stage, in_shape: tuple[int, ...]) -> nn.Module:
    if st.kind == "conv":
        return nn.Sequential(nn.Conv2d(in_shape[0], st.out, 3, st.stride, 1), _act(st.act))
    return nn.Sequential(nn.Flatten(), nn.Linear(int(np.prod(in_shape)), st.out), _act(st.act))


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        shapes = [tuple(spec.in_shape)] + spec.shapes()
        self.stages = nn.ModuleDict(
            {st.name: _stage_module(st, shapes[i]) for i, st in enumerate(spec.stages[: spec.tap_index + 1])}
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages.values():
            x = stage(x)
        return x

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.spec.shapes()[self.spec.tap_index]


class BatchStandardize(nn.Module):
    """Per-feature z-score using the statistics of the current batch."""

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if len(z) < 2:
            return z
        mean = z.mean(dim=0, keepdim=True)
        std = (z.var(dim=0, keepdim=True, unbiased=False) + 1e-5).sqrt()
        return (z - mean) / std


class Decoder(nn.Module):
    def __init__(self, spec: DecoderSpec):
        super().__init__()
        self.spec = spec
        layers = [BatchStandardize()] if spec.input_norm == "batch" else []
        for st in spec.stages:
            if st.kind == "fc":
                layers += [nn.Flatten(), nn.Linear(st.in_size, st.out_size), _act(st.act), nn.Unflatten(1, st.reshape)]
            elif st.scale > 1:
                # learned up-sampling: exact inverse of the encoder's stride-s, 3x3, pad-1 conv shape map
                k = 2 * st.scale
                layers += [nn.ConvTranspose2d(st.in_size, st.out_size, k, st.scale, st.scale // 2), _act(st.act)]
            else:
                layers += [nn.Conv2d(st.in_size, st.out_size, 3, 1, 1), _act(st.act)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != tuple(self.spec.in_shape):
            raise SpecError(f"decoder expects input {self.spec.in_shape}, got {tuple(z.shape[1:])}")
        return self.net(z)


class Classifier(nn.Module):
    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        enc = spec.encoder
        enc.validate()
        shapes = [tuple(enc.in_shape)] + enc.shapes()
        trunk = {}
        for i in range(enc.tap_index + 1, len(enc.stages)):
            st = enc.stages[i]
            trunk[st.name] = _stage_module(st, shapes[i])
        self.trunk = nn.ModuleDict(trunk)
        feat = int(np.prod(shapes[-1]))
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(feat, spec.hidden), nn.ELU(), nn.Linear(spec.hidden, spec.k))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        for stage in self.trunk.values():
            z = stage(z)
        return self.head(z)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        c, h, w = spec.in_shape
        layers = []
        for ch in spec.channels:
            layers += [nn.Conv2d(c, ch, 3, 2, 1), nn.LeakyReLU(0.2)]
            c, h, w = ch, (h - 1) // 2 + 1, (w - 1) // 2 + 1
        layers += [nn.Flatten(), nn.Linear(c * h * w, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x)).squeeze(1)


class Perceptual(nn.Module):
    """Frozen feature extractor; returns the list of tapped stage activations."""

    def __init__(self, spec: PerceptualSpec):
        super().__init__()
        self.spec = spec
        c = spec.in_shape[0]
        blocks = []
        for ch in spec.channels:
            blocks.append(nn.Sequential(nn.Conv2d(c, ch, 3, 2, 1), _act(spec.act)))
            c = ch
        self.blocks = nn.ModuleList(blocks)
        self.requires_grad_(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self.spec.taps:
                feats.append(x)
        return feats


class PrivateNet(nn.Module):
    def __init__(self, spec: PrivateSpec):
        super().__init__()
        self.spec = spec
        c, h, w = spec.in_shape
        convs = {}
        for i, ch in enumerate(spec.channels):
            convs[f"conv{i + 1}"] = nn.Sequential(nn.Conv2d(c, ch, 3, 2, 1), nn.ELU())
            c, h, w = ch, (h - 1) // 2 + 1, (w - 1) // 2 + 1
        self.convs = nn.ModuleDict(convs)
        self.hidden = nn.Sequential(nn.Flatten(), nn.Linear(c * h * w, spec.hidden), nn.ELU())
        self.out = nn.Linear(spec.hidden, spec.n_classes)
        if spec.tap not in list(convs) + ["hidden", "logits"]:
            raise SpecError(f"unknown private-network tap {spec.tap!r}")

    def features(self, x: torch.Tensor, tap: str | None = None) -> torch.Tensor:
        tap = tap or self.spec.tap
        for name, block in self.convs.items():
            x = block(x)
            if name == tap:
                return x.flatten(1)
        x = self.hidden(x)
        if tap == "hidden":
            return x
        if tap == "logits":
            return self.out(x)
        raise SpecError(f"unknown private-network tap {tap!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.hidden(self._convs(x)))

    def _convs(self, x):
        for block in self.convs.values():
            x = block(x)
        return x


class Mapper(nn.Module):
    def __init__(self, spec: MapperSpec):
        super().__init__()
        self.spec = spec
        self.net = nn.Sequential(nn.Linear(spec.in_dim, spec.hidden), nn.ELU(), nn.Linear(spec.hidden, spec.out_dim))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z.flatten(1))


_BUILDERS = {
    EncoderSpec: Encoder,
    DecoderSpec: Decoder,
    ClassifierSpec: Classifier,
    DiscriminatorSpec: Discriminator,
    PerceptualSpec: Perceptual,
    PrivateSpec: PrivateNet,
    MapperSpec: Mapper,
}


def _init_(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.ConvTranspose2d)):
            if isinstance(m, nn.ConvTranspose2d):
                # each output pixel sees in_channels * (k / stride)^2 inputs
                fan_in = m.weight.shape[0] * m.weight[0, 0].numel() // (m.stride[0] * m.stride[1])
            else:
                fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                w = torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1
                m.weight.copy_(w * bound)
                if m.bias is not None:
                    m.bias.zero_()


def build(spec, seed: int, dtype: torch.dtype = torch.float32) -> nn.Module:
    """Instantiate and deterministically initialize the network for ``spec``."""
    try:
        cls = _BUILDERS[type(spec)]
    except KeyError:
        raise SpecError(f"no builder for {type(spec).__name__}") from None
    model = cls(spec)
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    _init_(model, gen)
    model.init_seed = int(seed)
    model.to(dtype)
    if isinstance(model, Perceptual):
        model.requires_grad_(False)
    return model


# --- functional surface -----------------------------------------------------


def encode(enc: Encoder, x: torch.Tensor) -> torch.Tensor:
    return enc(x)


def decode(dec: Decoder, z: torch.Tensor) -> torch.Tensor:
    return dec(z)


def classify(clf: Classifier, z: torch.Tensor) -> torch.Tensor:
    return clf(z)


def discriminate(disc: Discriminator, x: torch.Tensor) -> torch.Tensor:
    return disc(x)


def perceptual(g: Perceptual, x: torch.Tensor) -> list[torch.Tensor]:
    return g(x)


def private_features(c: PrivateNet, x: torch.Tensor, tap: str | None = None) -> torch.Tensor:
    return c.features(x, tap)


def gradient(loss: torch.Tensor, params: Sequence[torch.Tensor] | nn.Module) -> list[torch.Tensor]:
    """Gradients of a scalar loss. Parameters that do not influence the loss are an error."""
    if isinstance(params, nn.Module):
        params = [p for p in params.parameters() if p.requires_grad]
    params = list(params)
    if not params:
        raise ValueError("no trainable parameters given")
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any trainable parameter")
    return list(torch.autograd.grad(loss, params, allow_unused=False))


def param_checksum(module: nn.Module | None) -> str:
    if module is None:
        return ""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- checkpoint format ------------------------------------------------------


def _spec_to_json(spec) -> dict:
    kind = next(k for k, v in SPEC_KINDS.items() if isinstance(spec, v))
    return {"kind": kind, "spec": asdict(spec)}


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def spec_from_json(obj: dict):
    kind, raw = obj["kind"], obj["spec"]
    if kind == "encoder":
        return EncoderSpec(tuple(raw["in_shape"]), tuple(Stage(**s) for s in raw["stages"]), raw["tap"])
    if kind == "decoder":
        stages = tuple(
            DecoderStage(**{**s, "reshape": _tuplify(s["reshape"])}) for s in raw["stages"]
        )
        return DecoderSpec(tuple(raw["in_shape"]), tuple(raw["out_shape"]), stages, raw.get("input_norm", "none"))
    if kind == "classifier":
        enc = spec_from_json({"kind": "encoder", "spec": raw["encoder"]})
        return ClassifierSpec(enc, raw["hidden"], raw["k"])
    cls = SPEC_KINDS[kind]
    return cls(**{k: _tuplify(v) for k, v in raw.items()})


def save_checkpoint(module: nn.Module, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = _spec_to_json(module.spec)
    meta["init_seed"] = getattr(module, "init_seed", None)
    arrays = {
        name: t.detach().cpu().numpy().astype("<f4") for name, t in module.state_dict().items()
    }
    arrays["__spec__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # fixed entry timestamps keep files byte-identical across runs
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> nn.Module:
    try:
        with np.load(Path(path), allow_pickle=False) as npz:
            meta = json.loads(npz["__spec__"].tobytes().decode())
            spec = spec_from_json(meta)
            model = build(spec, meta.get("init_seed") or 0)
            state = {k: torch.from_numpy(npz[k].astype(np.float32)) for k in npz.files if k != "__spec__"}
        model.load_state_dict(state, strict=True)
    except SpecError:
        raise
    except (OSError, ValueError, KeyError, RuntimeError, zipfile.BadZipFile) as exc:
        raise SpecError(f"unreadable checkpoint {path}: {exc}") from exc
    model.init_seed = meta.get("init_seed")
    return model
