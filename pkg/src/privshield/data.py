"""Image/attribute datasets: synthetic renderer, manifest I/O, splitting and batching.

Images are stored NHWC float32 in [0, 1]; networks consume NCHW tensors
(see :func:`to_tensor`).
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

ROLES = ("private", "adversary", "test")

# Attribute cues are 4x4 checkerboard markers placed in cells of a 4x4 grid.
_GRID = 4
_MARKER = 4
MAX_ATTRIBUTES = _GRID * _GRID


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # H x W x C in [0, 1]
    attributes: np.ndarray  # (k,) in {0, 1}
    identity: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of samples held as stacked arrays."""

    images: np.ndarray
    attributes: np.ndarray
    identities: np.ndarray
    k: int = field(default=-1)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        attributes = np.ascontiguousarray(self.attributes, dtype=np.uint8)
        identities = np.ascontiguousarray(self.identities, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {images.shape}")
        n = len(images)
        if attributes.ndim != 2 or len(attributes) != n or len(identities) != n:
            raise ValueError("images, attributes and identities disagree on sample count")
        k = attributes.shape[1] if self.k < 0 else self.k
        if attributes.shape[1] != k:
            raise ValueError(f"attribute arity {attributes.shape[1]} != declared k={k}")
        if n and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if n and not np.isin(attributes, (0, 1)).all():
            raise ValueError("attributes must be binary")
        if n and identities.min() < 0:
            raise ValueError("identity labels must be non-negative")
        for arr in (images, attributes, identities):
            arr.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "attributes", attributes)
        object.__setattr__(self, "identities", identities)
        object.__setattr__(self, "k", k)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.attributes[i], int(self.identities[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def n_identities(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.attributes[idx], self.identities[idx], k=self.k)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.attributes, self.identities):
            h.update(arr.tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    role: str
    data: Dataset
    indices: np.ndarray  # positions in the source dataset

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown split role {self.role!r}")

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 20
    samples_per_identity: int = 100
    k_attributes: int = 8
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    noise_std: float = 0.02

    def validate(self) -> None:
        for name in ("n_identities", "samples_per_identity", "k_attributes", "image_size", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16 to place distinguishable attribute cues")
        if self.k_attributes > MAX_ATTRIBUTES:
            raise ValueError(f"at most {MAX_ATTRIBUTES} attributes fit the cue grid")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit child seed from a parent seed and string/int keys."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        words.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --- synthetic renderer -----------------------------------------------------


def _cue_cells(k: int, size: int) -> list[tuple[int, int]]:
    """Top-left corners of the k marker slots (one per grid cell, fixed order)."""
    cell = size // _GRID
    order = [(r, c) for r in range(_GRID) for c in range(_GRID)]
    # interleave so low-k configurations spread markers over the image
    order = order[::2] + order[1::2]
    off = (cell - _MARKER) // 2
    return [(r * cell + off, c * cell + off) for r, c in order[:k]]


def _identity_params(rng: np.random.Generator, channels: int) -> dict:
    return {
        "bg": rng.uniform(0.15, 0.85, channels),
        "bg_grad": rng.uniform(-0.15, 0.15, (2, channels)),
        "face": rng.uniform(0.2, 0.8, channels),
        "center": rng.uniform(-0.12, 0.12, 2),
        "radii": rng.uniform(0.22, 0.38, 2),
        "tex_freq": rng.uniform(2.0, 6.0),
        "tex_angle": rng.uniform(0.0, np.pi),
        "tex_amp": rng.uniform(0.05, 0.15, channels),
        "band": rng.uniform(0.1, 0.9, channels),
        "band_pos": rng.uniform(-0.45, -0.25),
    }


def _render_base(p: dict, size: int, channels: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.linspace(-0.5, 0.5, size), np.linspace(-0.5, 0.5, size), indexing="ij")
    img = p["bg"][None, None, :] + ys[..., None] * p["bg_grad"][0] + xs[..., None] * p["bg_grad"][1]
    # hair-like band
    band = np.abs(ys - p["band_pos"]) < 0.08
    img[band] = p["band"]
    # textured ellipse
    dy, dx = ys - p["center"][0], xs - p["center"][1]
    inside = (dy / p["radii"][0]) ** 2 + (dx / p["radii"][1]) ** 2 <= 1.0
    u = np.cos(p["tex_angle"]) * xs + np.sin(p["tex_angle"]) * ys
    tex = np.sin(2 * np.pi * p["tex_freq"] * u)[..., None] * p["tex_amp"]
    face = p["face"][None, None, :] + tex
    img = np.where(inside[..., None], face, img)
    return np.clip(img, 0.05, 0.95)


def _marker(channels: int) -> np.ndarray:
    m = np.zeros((_MARKER, _MARKER, channels))
    half = _MARKER // 2
    m[:half, :half] = 1.0
    m[half:, half:] = 1.0
    return m


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Render a deterministic labeled dataset.

    Identity fixes background, an ellipse with its color, size, position and stripe
    texture, and a colored band. Attribute j stamps a black/white checker marker
    into its own grid cell. Samples are ordered by identity.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    s, c, k = config.image_size, config.channels, config.k_attributes
    n = config.n_identities * config.samples_per_identity
    cells = _cue_cells(k, s)
    marker = _marker(c)
    images = np.empty((n, s, s, c), dtype=np.float32)
    attributes = rng.integers(0, 2, size=(n, k), dtype=np.uint8)
    identities = np.repeat(np.arange(config.n_identities), config.samples_per_identity)
    bases = [_render_base(_identity_params(rng, c), s, c) for _ in range(config.n_identities)]
    for i in range(n):
        img = bases[identities[i]].copy()
        # small per-sample jitter of overall brightness keeps samples of one identity distinct
        img = img + rng.uniform(-0.03, 0.03)
        for j, (r0, c0) in enumerate(cells):
            if attributes[i, j]:
                img[r0:r0 + _MARKER, c0:c0 + _MARKER] = marker
        img = img + rng.normal(0.0, config.noise_std, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, attributes, identities, k=k)


def read_attribute_cues(images: np.ndarray, k: int) -> np.ndarray:
    """Pixel-rule oracle: recover attribute bits from checker contrast in each slot."""
    images = np.asarray(images)
    s = images.shape[1]
    half = _MARKER // 2
    out = np.zeros((len(images), k), dtype=np.uint8)
    for j, (r0, c0) in enumerate(_cue_cells(k, s)):
        patch = images[:, r0:r0 + _MARKER, c0:c0 + _MARKER, :]
        on = 0.5 * (patch[:, :half, :half].mean(axis=(1, 2, 3)) + patch[:, half:, half:].mean(axis=(1, 2, 3)))
        off = 0.5 * (patch[:, :half, half:].mean(axis=(1, 2, 3)) + patch[:, half:, :half].mean(axis=(1, 2, 3)))
        out[:, j] = (on - off) > 0.5
    return out


# --- manifest I/O -----------------------------------------------------------


def write_manifest_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write PNGs plus ``manifest.csv`` (``path,identity,attr_0..attr_{k-1}``)."""
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "identity"] + [f"attr_{j}" for j in range(dataset.k)])
        for i in range(len(dataset)):
            rel = f"images/{i:06d}.png"
            arr = np.round(dataset.images[i] * 255.0).astype(np.uint8)
            if arr.shape[2] == 1:
                arr = arr[..., 0]
            Image.fromarray(arr).save(directory / rel, optimize=False)
            writer.writerow([rel, int(dataset.identities[i])] + [int(a) for a in dataset.attributes[i]])
    return manifest


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32) or im.mode.startswith("I"):
        scale = 65535.0
    elif arr.dtype == bool:
        scale = 1.0
    else:
        raise ValueError(f"unsupported pixel type {arr.dtype}")
    arr = arr.astype(np.float32) / scale
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def load_manifest(path: str | Path) -> Dataset:
    """Load a CSV manifest; image paths are relative to the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    header = rows[0]
    if header[:2] != ["path", "identity"]:
        raise ManifestError(f"{path}: header must start with 'path,identity', got {header[:2]}")
    k = len(header) - 2
    if k < 1 or header[2:] != [f"attr_{j}" for j in range(k)]:
        raise ManifestError(f"{path}: attribute columns must be attr_0..attr_{{k-1}}")
    images, attrs, ids = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != k + 2:
            raise ManifestError(
                f"{path}: row {lineno} has {len(row) - 2} attribute columns, expected {k}"
            )
        try:
            identity = int(row[1])
            bits = [int(v) for v in row[2:]]
        except ValueError as exc:
            raise ManifestError(f"{path}: row {lineno} is malformed ({exc})") from None
        if identity < 0 or any(b not in (0, 1) for b in bits):
            raise ManifestError(f"{path}: row {lineno} has out-of-range labels")
        img_path = path.parent / row[0]
        if not img_path.is_file():
            raise ManifestError(f"{path}: row {lineno} references missing image {row[0]}")
        img = _read_png(img_path)
        if images and img.shape != images[0].shape:
            raise ManifestError(f"{path}: row {lineno} image shape {img.shape} != {images[0].shape}")
        images.append(img)
        attrs.append(bits)
        ids.append(identity)
    if not images:
        raise ManifestError(f"{path}: no data rows")
    return Dataset(np.stack(images), np.asarray(attrs), np.asarray(ids), k=k)


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    """Concatenate two datasets; b's identities are shifted past a's."""
    if a.image_shape != b.image_shape or a.k != b.k:
        raise ValueError("datasets disagree on image shape or attribute arity")
    ids = np.concatenate([a.identities, b.identities + a.n_identities])
    return Dataset(
        np.concatenate([a.images, b.images]), np.concatenate([a.attributes, b.attributes]), ids, k=a.k
    )


# --- splitting and batching -------------------------------------------------


def _split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    # rounding cumulative boundaries keeps each size within one sample of f*n
    # and covers every sample when the fractions sum to one
    bounds = [0] + [min(n, int(np.floor(c * n + 0.5))) for c in np.cumsum(fractions)]
    return [b - a for a, b in zip(bounds[:-1], bounds[1:])]


def split_dataset(
    dataset: Dataset,
    fractions: Sequence[float],
    seed: int,
    identity_disjoint: bool = False,
) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Split into (X1 private, X2 adversary, T test).

    Default mode permutes samples uniformly. ``identity_disjoint`` instead
    assigns whole identities to each split, so sizes only approximate the
    requested fractions.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("need three positive split fractions")
    if sum(fractions) > 1.0 + 1e-9:
        raise ValueError(f"split fractions sum to {sum(fractions):.3f} > 1")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    if identity_disjoint:
        ids = rng.permutation(np.unique(dataset.identities))
        counts = _split_sizes(len(ids), fractions)
        groups, start = [], 0
        for c in counts:
            groups.append(ids[start:start + c])
            start += c
        parts = [np.flatnonzero(np.isin(dataset.identities, g)) for g in groups]
    else:
        perm = rng.permutation(n)
        sizes = _split_sizes(n, fractions)
        bounds = np.cumsum([0] + sizes)
        parts = [np.sort(perm[bounds[i]:bounds[i + 1]]) for i in range(3)]
    for role, idx in zip(ROLES, parts):
        if len(idx) == 0:
            raise ValueError(f"split {role!r} is empty")
    return tuple(DatasetSplit(role, dataset.subset(idx), idx) for role, idx in zip(ROLES, parts))


def epoch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(derive_seed(shuffle_seed, epoch)).permutation(n)


def batch_iterator(
    data: Dataset | DatasetSplit, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0
) -> Iterator[np.ndarray]:
    """Yield index batches covering one epoch; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    order = epoch_order(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batch_stream(n: int, batch_size: int, shuffle_seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled each epoch."""
    epoch = 0
    while True:
        order = epoch_order(n, shuffle_seed, epoch)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]
        epoch += 1


def to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """NHWC numpy -> NCHW tensor."""
    return torch.from_numpy(np.array(np.asarray(images).transpose(0, 3, 1, 2), order="C")).to(dtype)


def to_numpy_images(x: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> NHWC float32 numpy."""
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)
