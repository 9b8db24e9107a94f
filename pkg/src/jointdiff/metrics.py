"""Segmentation scores, Frechet distances, inception score and distribution checks."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import IGNORE_INDEX

# ---------------------------------------------------------------- segmentation


def confusion(pred, gt, k: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """K x K counts, rows ground truth, columns prediction; ignored gt pixels are skipped."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    keep = gt != ignore_index
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= k or g.min() < 0):
        raise ValueError(f"ground truth holds class {g.max()} >= K={k}")
    if p.size and (p.max() >= k or p.min() < 0):
        raise ValueError(f"prediction holds class {p.max()} >= K={k}")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k).astype(np.int64)


@dataclass
class SegScores:
    iou: np.ndarray  # NaN for classes absent from gt and prediction
    f1: np.ndarray
    miou: float
    macro_f1: float


def iou_f1(conf) -> SegScores:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (tp + fp + fn), np.nan)
        f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
    return SegScores(iou, f1, float(np.nanmean(iou)), float(np.nanmean(f1)))


# ---------------------------------------------------------------- Frechet distances


def sym_psd_sqrt(m, sym_tol: float = 1e-6, eig_floor: float = -1e-8) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"need a square matrix, got {m.shape}")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > sym_tol:
        raise ValueError(f"matrix is not symmetric (max |M - M^T| = {asym:.3g})")
    lam, v = np.linalg.eigh(0.5 * (m + m.T))
    if lam.size and lam.min() < eig_floor * max(1.0, abs(lam).max()):
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {lam.min():.3g})")
    lam = np.clip(lam, 0.0, None)
    return (v * np.sqrt(lam)) @ v.T


def gaussian_fit(features) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least d+1 = {d + 1} feature vectors for a {d}-dim covariance, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    return mu, xc.T @ xc / (n - 1)


def frechet_distance(mu1, s1, mu2, s2) -> float:
    r1 = sym_psd_sqrt(s1)
    mid = r1 @ s2 @ r1
    covmean = sym_psd_sqrt(0.5 * (mid + mid.T))
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean))
    if d < -1e-6 * max(1.0, float(np.trace(s1) + np.trace(s2))):
        raise ArithmeticError(f"Frechet distance came out negative ({d:.3g})")
    return max(d, 0.0)


def fid(real, fake) -> float:
    """Frechet distance between Gaussian fits of two (n, d) feature sets."""
    mu1, s1 = gaussian_fit(real)
    mu2, s2 = gaussian_fit(fake)
    if mu1.shape != mu2.shape:
        raise ValueError(f"feature dims differ: {mu1.shape[0]} vs {mu2.shape[0]}")
    return frechet_distance(mu1, s1, mu2, s2)


def spatial_descriptors(maps, grid: int | None = None) -> np.ndarray:
    """(n, h, w, c) feature maps -> (n, h*w) channel-mean descriptors.

    With ``grid`` the channel-mean map is first average-pooled to
    ``grid x grid`` sites, keeping the descriptor small enough for the
    covariance estimate at desk-scale sample counts.
    """
    m = np.asarray(maps, dtype=np.float64)
    if m.ndim != 4:
        raise ValueError(f"need (n, h, w, c) maps, got {m.shape}")
    d = m.mean(axis=-1)
    if grid is not None and d.shape[1] > grid:
        n, h, w = d.shape
        if h % grid or w % grid:
            raise ValueError(f"map {h}x{w} cannot be pooled to a {grid}x{grid} grid")
        d = d.reshape(n, grid, h // grid, grid, w // grid).mean(axis=(2, 4))
    return d.reshape(len(d), -1)


def pooled_descriptors(maps) -> np.ndarray:
    m = np.asarray(maps, dtype=np.float64)
    return m.mean(axis=(1, 2))


def sfid(real_maps, fake_maps, grid: int | None = None) -> float:
    return fid(spatial_descriptors(real_maps, grid), spatial_descriptors(fake_maps, grid))


# ---------------------------------------------------------------- inception score


def inception_score(prob_maps, floor: float = 1e-12) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y))) with p(y|x_i) the spatial mean of pixel softmaxes."""
    p = np.asarray(prob_maps, dtype=np.float64)
    if p.ndim == 4:
        p = p.mean(axis=(1, 2))
    if p.ndim != 2 or len(p) == 0:
        raise ValueError(f"need (n, K) or (n, h, w, K) probabilities, got {np.shape(prob_maps)}")
    p = np.maximum(p, floor)
    p = p / p.sum(axis=1, keepdims=True)
    marg = p.mean(axis=0)
    kl = np.sum(p * (np.log(p) - np.log(marg)), axis=1)
    return float(np.exp(np.mean(kl)))


# ---------------------------------------------------------------- distributions


def class_frequency(masks, k: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Pixel share per class over a mask array, a list of masks/pairs, or a corpus."""
    if hasattr(masks, "masks"):
        masks = masks.masks()
    elif isinstance(masks, (list, tuple)):
        masks = [getattr(m, "mask", m) for m in masks]
    m = np.concatenate([np.asarray(x).ravel() for x in masks]) if isinstance(masks, list) else np.asarray(masks).ravel()
    m = m[m != ignore_index].astype(np.int64)
    if m.size == 0:
        raise ValueError("no scored pixels")
    if m.max() >= k:
        raise ValueError(f"mask holds class {m.max()} >= K={k}")
    counts = np.bincount(m, minlength=k)
    return counts / counts.sum()


def tvd(p, q) -> float:
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histograms differ in length: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def occurrence_rate(masks, k: int) -> np.ndarray:
    """Share of masks that contain each class at least once."""
    m = np.asarray(masks)
    flat = m.reshape(len(m), -1)
    return np.array([np.mean(np.any(flat == c, axis=1)) for c in range(k)])


def cooccurrence_rate(masks, cls: int, host: int) -> tuple[float, int]:
    """Fraction of ``cls`` components (4-connected) whose surrounding ring is mostly ``host``.

    Returns ``(rate, components)``; the rate is NaN when no component exists.
    """
    from .augment import connected_components

    hits = total = 0
    for m in np.asarray(masks):
        h, w = m.shape
        for comp in connected_components(m, cls):
            inside = np.zeros((h, w), bool)
            inside[comp[:, 0], comp[:, 1]] = True
            ring = np.zeros_like(inside)
            ring[1:] |= inside[:-1]
            ring[:-1] |= inside[1:]
            ring[:, 1:] |= inside[:, :-1]
            ring[:, :-1] |= inside[:, 1:]
            ring &= ~inside
            vals = m[ring]
            if vals.size == 0:
                continue
            total += 1
            hits += int(np.argmax(np.bincount(vals)) == host)
    return (hits / total if total else math.nan), total


def pearson(x, y) -> float | None:
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if len(x) < 3 or len(x) != len(y):
        return None
    sx, sy = x.std(), y.std()
    if sx < 1e-12 * max(1.0, abs(x).max()) or sy < 1e-12 * max(1.0, abs(y).max()):
        return None
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


@dataclass
class RareClassReport:
    delta_iou: np.ndarray
    occurrence: np.ndarray
    r: float | None

    def rows(self) -> list[dict]:
        return [
            {"class": k, "delta_iou": float(d), "occurrence": float(o)}
            for k, (d, o) in enumerate(zip(self.delta_iou, self.occurrence))
        ]


def rare_class_report(iou_with, iou_without, occurrence) -> RareClassReport:
    a, b, occ = (np.asarray(v, np.float64) for v in (iou_with, iou_without, occurrence))
    if not (a.shape == b.shape == occ.shape):
        raise ValueError("per-class vectors must share one class set")
    if np.any((occ < 0) | (occ > 1)):
        raise ValueError("occurrence rates must lie in [0, 1]")
    delta = a - b
    ok = np.isfinite(delta)
    return RareClassReport(delta, occ, pearson(delta[ok], occ[ok]))


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    miou: float
    macro_f1: float
    per_class_iou: list[float]
    per_class_f1: list[float]
    confusion: list[list[int]] = field(default_factory=list)
    class_freq: list[float] | None = None
    tvd: float | None = None
    fid: float | None = None
    sfid: float | None = None
    inception_score: float | None = None

    @classmethod
    def from_confusion(cls, conf) -> "MetricsReport":
        s = iou_f1(conf)
        return cls(s.miou, s.macro_f1, s.iou.tolist(), s.f1.tolist(), np.asarray(conf).tolist())

    def rows(self) -> list[tuple[str, float]]:
        out = [("miou", self.miou), ("macro_f1", self.macro_f1)]
        out += [(f"iou_{k}", v) for k, v in enumerate(self.per_class_iou)]
        out += [(f"f1_{k}", v) for k, v in enumerate(self.per_class_f1)]
        for name in ("tvd", "fid", "sfid", "inception_score"):
            v = getattr(self, name)
            if v is not None:
                out.append((name, v))
        if self.class_freq is not None:
            out += [(f"freq_{k}", v) for k, v in enumerate(self.class_freq)]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, v in self.rows():
            w.writerow([name, _fmt(v)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6f}"


def _jsonable(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj
