"""Utility and privacy metrics, plus the serializable MetricsReport."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

PSNR_CAP = 100.0


@dataclass(frozen=True)
class ConfusionTable:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_tables(predictions: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> list[ConfusionTable]:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.ndim == 1:
        predictions, labels = predictions[:, None], labels[:, None]
    if predictions.shape != labels.shape:
        raise ValueError(f"prediction arity {predictions.shape} != label arity {labels.shape}")
    pred = predictions >= threshold
    true = labels.astype(bool)
    tp = (pred & true).sum(0)
    tn = (~pred & ~true).sum(0)
    fp = (pred & ~true).sum(0)
    fn = (~pred & true).sum(0)
    return [ConfusionTable(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, tn, fp, fn)]


def mcc(t: ConfusionTable) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    denom = (t.tp + t.fp) * (t.tp + t.fn) * (t.tn + t.fp) * (t.tn + t.fn)
    if denom == 0:
        return 0.0
    return (t.tp * t.tn - t.fp * t.fn) / math.sqrt(denom)


def per_attribute_mcc(predictions, labels, threshold: float = 0.5) -> list[float]:
    return [mcc(t) for t in confusion_tables(predictions, labels, threshold)]


def mean_mcc(predictions, labels, threshold: float = 0.5) -> float:
    return float(np.mean(per_attribute_mcc(predictions, labels, threshold)))


def cosine_similarity(u, v) -> float:
    """u.v / (|u||v|); a zero vector gives 0 with a RuntimeWarning."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    # exactly rounded sums keep near-orthogonal pairs accurate
    nu, nv = math.sqrt(math.fsum(u * u)), math.sqrt(math.fsum(v * v))
    if nu == 0 or nv == 0:
        warnings.warn("cosine similarity of a zero vector is defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(math.fsum(u * v) / (nu * nv), -1.0, 1.0))


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = na * nb
    out = np.zeros(len(a))
    ok = denom > 0
    if not ok.all():
        warnings.warn("cosine similarity of a zero vector is defined as 0", RuntimeWarning, stacklevel=2)
    out[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / denom[ok]
    return np.clip(out, -1.0, 1.0)


def face_similarity(features_x: np.ndarray, features_x_hat: np.ndarray) -> float:
    """Mean pairwise cosine similarity of private-network features of X and X_hat."""
    return float(rowwise_cosine(features_x, features_x_hat).mean())


def feature_similarity(mapped: np.ndarray, target: np.ndarray) -> float:
    return float(rowwise_cosine(mapped, target).mean())


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two spatial axes of an H x W array."""
    k = len(w)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ w


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0, win: int = 11, sigma: float = 1.5) -> float:
    """SSIM of two H x W x C images (Gaussian window, K1=0.01, K2=0.03), mean over channels and windows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < win:
        raise ValueError(f"images smaller than the {win}x{win} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    w = _gaussian_window(win, sigma)
    vals = []
    for ch in range(x.shape[2]):
        a, b = x[..., ch], y[..., ch]
        mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
        var_a = _filter_valid(a * a, w) - mu_a ** 2
        var_b = _filter_valid(b * b, w) - mu_b ** 2
        cov = _filter_valid(a * b, w) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def mean_ssim(xs: np.ndarray, ys: np.ndarray) -> float:
    return float(np.mean([ssim(a, b) for a, b in zip(xs, ys)]))


def mean_psnr(xs: np.ndarray, ys: np.ndarray) -> float:
    return float(np.mean([psnr(a, b) for a, b in zip(xs, ys)]))


@dataclass(frozen=True)
class LDAScore:
    s_w: float
    s_b: float
    score: float  # inf when s_w == 0 < s_b

    @property
    def degenerate(self) -> bool:
        return math.isinf(self.score)


def lda_score(features: np.ndarray, labels: Sequence[int]) -> LDAScore:
    """Trace-based within/between class scatter, both normalized by N."""
    z = np.asarray(features, dtype=np.float64)
    z = z.reshape(len(z), -1)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("lda_score needs at least two identities")
    n = len(z)
    mu = z.mean(axis=0)
    s_w = s_b = 0.0
    for c in classes:
        zc = z[labels == c]
        mc = zc.mean(axis=0)
        s_w += float(((zc - mc) ** 2).sum())
        s_b += len(zc) * float(((mc - mu) ** 2).sum())
    s_w /= n
    s_b /= n
    if s_b == 0:
        score = 0.0
    elif s_w == 0:
        score = math.inf
    else:
        score = s_b / s_w
    return LDAScore(s_w, s_b, score)


def project_2d(features: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates; each axis signed so its largest-magnitude entry is positive."""
    z = np.asarray(features, dtype=np.float64)
    z = z.reshape(len(z), -1)
    if len(z) < 2:
        raise ValueError("need at least two samples")
    zc = z - z.mean(axis=0)
    u, s, vt = np.linalg.svd(zc, full_matrices=False)
    coords = zc @ vt[:2].T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((len(z), 2 - coords.shape[1]))])
    for j in range(2):
        col = coords[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            coords[:, j] = -col
    return coords


# --- report -----------------------------------------------------------------

CSV_COLUMNS = (
    "mean_mcc", "face_sim", "feature_sim", "ssim", "psnr",
    "s_w", "s_b", "lda_score", "per_attribute_mcc",
    "config_hash", "seed", "attack_steps", "mapper_steps", "label",
)


@dataclass
class MetricsReport:
    mean_mcc: float
    face_sim: float
    feature_sim: float
    ssim: float
    psnr: float
    s_w: float
    s_b: float
    lda_score: float
    per_attribute_mcc: list[float] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    attack_steps: int = 0
    mapper_steps: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {f for f in cls.__dataclass_fields__}
        missing = [k for k in ("mean_mcc", "face_sim", "feature_sim", "ssim", "psnr") if k not in d]
        if missing:
            raise ValueError(f"metrics record lacks {missing}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def csv_row(self) -> list[str]:
        d = self.to_dict()
        d["per_attribute_mcc"] = ";".join(f"{v:.6f}" for v in self.per_attribute_mcc)
        return [_fmt(d[c]) for c in CSV_COLUMNS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
