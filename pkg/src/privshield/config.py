"""Declarative experiment configuration (JSON or YAML) with strict schema checks."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .attacks import AttackConfig
from .data import SynthConfig
from .losses import HyperParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass
class DataSection:
    synth: Optional[SynthConfig] = field(default_factory=SynthConfig)
    manifest: Optional[str] = None
    extra_manifest: Optional[str] = None  # merged into X2 (and X1 when extra_to_x1)
    extra_to_x1: bool = False
    fractions: list[float] = field(default_factory=lambda: [0.5, 0.25, 0.25])
    identity_disjoint: bool = False


@dataclass
class NetsSection:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    latent_dim: int = 64
    tap: str = "fc"
    act: str = "elu"
    perceptual_channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    perceptual_seed: int = 0
    private_hidden: int = 64
    private_tap: str = "hidden"


@dataclass
class EvalSection:
    seeds: int = 3  # number of replicates for sweeps
    threshold: float = 0.5
    grid_size: int = 16


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    nets: NetsSection = field(default_factory=NetsSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    out: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Settings under which the simulated decoder keeps pace with the encoder on the
# 32x32 synthetic data: it sees standardized Z (so rescaling Z is no defense),
# takes five steps per encoder step, and the encoder moves more slowly. Larger
# batches keep the utility gradient from losing single attributes.
DESK_OVERRIDES = {
    "train": {
        "lr_enc": 3e-4,
        "lr_dec": 3e-3,
        "dec_steps_per_alt": 5,
        "dec_input_norm": "batch",
        "batch_size": 64,
        "total_alternations": 1000,
    },
}


def desk_config(**sections) -> "ExperimentConfig":
    """Default config with the desk-scale training preset, then ``sections`` applied."""
    return with_overrides(with_overrides(ExperimentConfig(), **DESK_OVERRIDES), **sections)


def _type_ok(value, tp) -> bool:
    if tp is Any:
        return True
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp in (str, bool):
        return isinstance(value, tp)
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp) or (Any,)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    return isinstance(value, tp)


def _build(cls, raw, path: str, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{path or '<root>'}: expected a mapping, got {type(raw).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            errors.append(f"{path}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value, tp = raw[f.name], hints[f.name]
        optional = False
        if typing.get_origin(tp) in (typing.Union, types.UnionType):
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            optional = len(args) < len(typing.get_args(tp))
            tp = args[0]
        if value is None:
            if optional:
                kwargs[f.name] = None
            else:
                errors.append(f"{path}{f.name}: must not be null")
            continue
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, value, f"{path}{f.name}.", errors)
        elif _type_ok(value, tp):
            kwargs[f.name] = float(value) if tp is float else value
        else:
            errors.append(f"{path}{f.name}: expected {getattr(tp, '__name__', tp)}, got {value!r}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path or '<root>'}: {exc}")
        return cls()


def _semantic_checks(cfg: ExperimentConfig, errors: list[str]) -> None:
    d = cfg.data
    if (d.synth is None) == (d.manifest is None):
        errors.append("data: exactly one of 'synth' or 'manifest' must be set")
    if d.synth is not None:
        try:
            d.synth.validate()
        except ValueError as exc:
            errors.append(f"data.synth: {exc}")
    if len(d.fractions) != 3 or any(f <= 0 for f in d.fractions) or sum(d.fractions) > 1 + 1e-9:
        errors.append("data.fractions: need three positive fractions summing to <= 1")
    try:
        cfg.train.validate()
    except ValueError as exc:
        errors.append(f"train: {exc}")
    if cfg.nets.tap not in [f"conv{i + 1}" for i in range(len(cfg.nets.widths))] + ["fc"]:
        errors.append(f"nets.tap: unknown stage {cfg.nets.tap!r}")
    if cfg.eval.seeds < 1:
        errors.append("eval.seeds: must be >= 1")
    if cfg.eval.grid_size < 1:
        errors.append("eval.grid_size: must be >= 1")


def config_from_dict(raw: dict) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, raw, "", errors)
    if not errors:
        _semantic_checks(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"{path}: parse error: {exc}"]) from None
    return config_from_dict(raw if raw is not None else {})


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of ``cfg`` with nested fields replaced, e.g. ``train={"hp": {"lambda1": 1.0}}``."""
    raw = cfg.to_dict()

    def merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v)
            else:
                dst[k] = v

    merge(raw, sections)
    return config_from_dict(raw)
