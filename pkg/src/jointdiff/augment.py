"""Assembling D + D' for downstream training, and the classical augmentation baselines."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ndcore as nd
from .codec import IGNORE_INDEX, LabeledPair
from .datagen import Corpus, load_corpus, save_corpus

ORIGINS = ("real", "synthetic")
BASELINES = ("cutout", "cutmix", "copy_paste")


@dataclass(frozen=True)
class ResamplePlan:
    R: int
    balance: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.R < 0:
            raise ValueError(f"R must be non-negative, got {self.R}")


@dataclass
class TrainingSet:
    entries: list[tuple[LabeledPair, str]]
    num_classes: int
    seed: int = 0
    plan: ResamplePlan | None = None
    real_repeat: int = 1

    def __len__(self) -> int:
        return len(self.entries)

    def count(self, origin: str) -> int:
        return sum(1 for _, o in self.entries if o == origin)

    @property
    def pairs(self) -> list[LabeledPair]:
        return [p for p, _ in self.entries]

    def epoch_order(self, epoch: int) -> np.ndarray:
        return nd.Rng(self.seed).generator("epoch", epoch).permutation(len(self.entries))


def build_training_set(real: Corpus, synthetic: Corpus | None, plan: ResamplePlan) -> TrainingSet:
    """Real pairs plus the first ``R * |real|`` synthetic pairs.

    With ``balance`` and R >= 1 every real pair appears R times, so the two
    origins are present 1:1.
    """
    need = plan.R * len(real)
    have = len(synthetic) if synthetic is not None else 0
    if have < need:
        raise ValueError(f"synthetic pool has {have} pairs, plan R={plan.R} needs {need}")
    if need and synthetic.shape != real.shape:
        raise ValueError(f"synthetic pairs are {synthetic.shape}, real pairs {real.shape}")
    if need and synthetic.num_classes != real.num_classes:
        raise ValueError("synthetic and real corpora disagree on K")
    repeat = plan.R if plan.balance and plan.R >= 1 else 1
    entries = [(p, "real") for _ in range(repeat) for p in real]
    entries += [(synthetic[i], "synthetic") for i in range(need)]
    return TrainingSet(entries, real.num_classes, plan.seed, plan, repeat)


# ---------------------------------------------------------------- persistence


def save_training_set(ts: TrainingSet, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n_real = ts.count("real") // ts.real_repeat
    real = [p for p, o in ts.entries if o == "real"][:n_real]
    syn = [p for p, o in ts.entries if o == "synthetic"]
    save_corpus(Corpus(real, ts.num_classes), d / "real.satp")
    save_corpus(Corpus(syn, ts.num_classes), d / "synthetic.satp")
    plan = ts.plan or ResamplePlan(0)
    lines = [
        f"R = {plan.R}",
        f"balance = {str(plan.balance).lower()}",
        f"seed = {ts.seed}",
        f"real_repeat = {ts.real_repeat}",
        f"real_unique = {n_real}",
        f"real_entries = {ts.count('real')}",
        f"synthetic_entries = {len(syn)}",
        f"total = {len(ts)}",
    ]
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_training_set(directory) -> TrainingSet:
    d = Path(directory)
    meta = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    real = load_corpus(d / "real.satp")
    syn = load_corpus(d / "synthetic.satp")
    repeat = int(meta["real_repeat"])
    plan = ResamplePlan(int(meta["R"]), meta["balance"] == "true", int(meta["seed"]))
    entries = [(p, "real") for _ in range(repeat) for p in real]
    entries += [(p, "synthetic") for p in syn]
    ts = TrainingSet(entries, real.num_classes, plan.seed, plan, repeat)
    if len(ts) != int(meta["total"]):
        raise ValueError(f"{d}: manifest total {meta['total']} disagrees with files ({len(ts)})")
    return ts


# ---------------------------------------------------------------- baselines


def _check_same(a: LabeledPair, b: LabeledPair) -> None:
    if a.shape != b.shape:
        raise ValueError(f"pair shapes differ: {a.shape} vs {b.shape}")


def cutout_box(pair: LabeledPair, y0: int, x0: int, side: int) -> LabeledPair:
    out = pair.copy()
    out.image[y0 : y0 + side, x0 : x0 + side] = 0.5
    out.mask[y0 : y0 + side, x0 : x0 + side] = IGNORE_INDEX
    return out


def sample_square(gen: np.random.Generator, h: int, w: int, max_frac: float) -> tuple[int, int, int]:
    side = int(gen.integers(0, int(max_frac * min(h, w)) + 1))
    y0 = int(gen.integers(0, h - side + 1))
    x0 = int(gen.integers(0, w - side + 1))
    return y0, x0, side


def cutout(pair: LabeledPair, gen: np.random.Generator, max_frac: float = 0.5) -> LabeledPair:
    """Grey out one random square and mark it ignore in the mask."""
    h, w = pair.shape
    return cutout_box(pair, *sample_square(gen, h, w, max_frac))


def cutmix_box(a: LabeledPair, b: LabeledPair, box: tuple[int, int, int, int]) -> LabeledPair:
    _check_same(a, b)
    y0, x0, y1, x1 = box
    out = a.copy()
    out.image[y0:y1, x0:x1] = b.image[y0:y1, x0:x1]
    out.mask[y0:y1, x0:x1] = b.mask[y0:y1, x0:x1]
    return out


def sample_box(gen: np.random.Generator, h: int, w: int) -> tuple[int, int, int, int]:
    # area fraction lam ~ U(0, 1), aspect kept square-ish as in the usual recipe
    lam = gen.random()
    bh, bw = int(round(h * np.sqrt(lam))), int(round(w * np.sqrt(lam)))
    y0 = int(gen.integers(0, h - bh + 1))
    x0 = int(gen.integers(0, w - bw + 1))
    return y0, x0, y0 + bh, x0 + bw


def cutmix(a: LabeledPair, b: LabeledPair, gen: np.random.Generator) -> LabeledPair:
    _check_same(a, b)
    return cutmix_box(a, b, sample_box(gen, *a.shape))


_STRUCT = {4: ndimage.generate_binary_structure(2, 1), 8: ndimage.generate_binary_structure(2, 2)}


def connected_components(mask, k: int, connectivity: int = 4) -> list[np.ndarray]:
    """Maximal connected sets of class-``k`` pixels as (n, 2) row/col arrays, in raster order of first pixel."""
    if connectivity not in _STRUCT:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, n = ndimage.label(np.asarray(mask) == k, structure=_STRUCT[connectivity])
    if n == 0:
        return []
    coords = np.argwhere(labels > 0)
    lab = labels[coords[:, 0], coords[:, 1]]
    order = np.argsort(lab, kind="stable")
    splits = np.cumsum(np.bincount(lab, minlength=n + 1)[1:])[:-1]
    return np.split(coords[order], splits)


def paste_component(a: LabeledPair, b: LabeledPair, comp: np.ndarray) -> LabeledPair:
    _check_same(a, b)
    out = a.copy()
    ys, xs = comp[:, 0], comp[:, 1]
    out.image[ys, xs] = b.image[ys, xs]
    out.mask[ys, xs] = b.mask[ys, xs]
    return out


def copy_paste(a: LabeledPair, b: LabeledPair, gen: np.random.Generator, classes) -> tuple[LabeledPair, bool]:
    """Paste one random foreground component of ``b`` into ``a`` at the same location.

    Returns the new pair and whether anything was pasted; a ``b`` without
    foreground yields an unchanged copy of ``a`` and ``False``.
    """
    _check_same(a, b)
    classes = list(classes)
    if not classes:
        raise ValueError("copy_paste needs a non-empty foreground class set")
    comps = [c for k in classes for c in connected_components(b.mask, k)]
    if not comps:
        return a.copy(), False
    return paste_component(a, b, comps[int(gen.integers(len(comps)))]), True


@dataclass
class BaselineConfig:
    cutout_max_frac: float = 0.5
    foreground: tuple[int, ...] = (3, 4, 5)


def build_baseline_pool(real: Corpus, method: str, n: int, seed: int, config: BaselineConfig | None = None) -> Corpus:
    """``n`` augmented copies of real pairs, usable wherever a synthetic pool is expected.

    Entry ``i`` transforms real pair ``i mod |real|`` (partnered with a
    random other pair for the mixing methods) using stream ``(method, i)``.
    """
    if method not in BASELINES:
        raise ValueError(f"unknown baseline {method!r}; choose from {BASELINES}")
    config = config or BaselineConfig()
    rng = nd.Rng(seed)
    out = []
    for i in range(n):
        gen = rng.generator(method, i)
        a = real[i % len(real)]
        if method == "cutout":
            out.append(cutout(a, gen, config.cutout_max_frac))
            continue
        b = real[int(gen.integers(len(real)))]
        if method == "cutmix":
            out.append(cutmix(a, b, gen))
        else:
            out.append(copy_paste(a, b, gen, config.foreground)[0])
    return Corpus(out, real.num_classes, seed)
