"""Small encoder-decoder segmenter: training, prediction, evaluation and feature taps.

Three resolution levels; every level is two 3x3 conv + SiLU, reached from
the one above by a stride-2 conv.  The decoder upsamples, concatenates the
skip from the matching encoder level and applies two convs, and a 1x1 head
produces K logits.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics
from . import ndcore as nd
from .augment import TrainingSet
from .datagen import Corpus
from .layers import Params, add_conv, conv, from_arrays, to_arrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegConfig:
    num_classes: int
    base_width: int = 32
    depth: int = 3
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    steps_per_epoch: int | None = None  # None: one full pass over the training set

    def __post_init__(self):
        if self.num_classes < 2 or self.depth < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid segmenter config {self}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * min(2**i, 2) for i in range(self.depth)]  # width doubles once, then stays

    def to_dict(self) -> dict:
        return asdict(self)


def init_segmenter(config: SegConfig, rng: nd.Rng) -> Params:
    gen = rng.generator("segmenter.init")
    w = config.widths
    p: Params = {}
    cin = 3
    for lvl in range(config.depth):
        if lvl:
            add_conv(p, f"down{lvl}", gen, w[lvl - 1], w[lvl])
            cin = w[lvl]
        add_conv(p, f"enc{lvl}.c1", gen, cin, w[lvl])
        add_conv(p, f"enc{lvl}.c2", gen, w[lvl], w[lvl])
    for lvl in reversed(range(config.depth - 1)):
        add_conv(p, f"up{lvl}", gen, w[lvl + 1], w[lvl])
        add_conv(p, f"dec{lvl}.c1", gen, 2 * w[lvl], w[lvl])
        add_conv(p, f"dec{lvl}.c2", gen, w[lvl], w[lvl])
    add_conv(p, "head", gen, w[0], config.num_classes, k=1)
    return p


def segmenter_forward(images, params: Params, config: SegConfig, taps: dict | None = None) -> nd.Tensor:
    """(N, H, W, 3) images in [0, 1] -> (N, H, W, K) logits.

    ``taps`` receives ``bottleneck`` (deepest encoder output) and
    ``decoder`` (the first decoder level, half resolution for depth 3).
    """
    x = nd.as_tensor(images)
    if x.ndim == 3:
        x = nd.Tensor(x.data[None])
    if x.shape[-1] != 3:
        raise ValueError(f"segmenter expects 3 input channels, got {x.shape[-1]}")
    f = 2 ** (config.depth - 1)
    if x.shape[1] % f or x.shape[2] % f:
        raise ValueError(f"image size {x.shape[1]}x{x.shape[2]} not divisible by {f}")
    x = nd.Tensor((x.data - 0.5) * 2.0)
    skips = []
    for lvl in range(config.depth):
        if lvl:
            x = nd.silu(conv(params, f"down{lvl}", x, stride=2))
        x = nd.silu(conv(params, f"enc{lvl}.c1", x))
        x = nd.silu(conv(params, f"enc{lvl}.c2", x))
        skips.append(x)
    if taps is not None:
        taps["bottleneck"] = x
    for lvl in reversed(range(config.depth - 1)):
        x = nd.silu(conv(params, f"up{lvl}", nd.upsample_nearest(x, 2)))
        x = nd.silu(conv(params, f"dec{lvl}.c1", nd.concat([x, skips[lvl]], axis=-1)))
        x = nd.silu(conv(params, f"dec{lvl}.c2", x))
        if taps is not None and "decoder" not in taps:
            taps["decoder"] = x
    return conv(params, "head", x)


@dataclass
class Segmenter:
    config: SegConfig
    params: dict[str, np.ndarray]
    image_shape: tuple[int, int] | None = None

    def tensors(self) -> Params:
        return from_arrays(self.params)

    def save(self, path) -> None:
        nd.save_checkpoint(path, self.params, {"kind": "segmenter", "config": self.config.to_dict(), "image_shape": self.image_shape})

    @classmethod
    def load(cls, path) -> "Segmenter":
        meta = nd.load_metadata(path)
        if meta.get("kind") != "segmenter":
            raise ValueError(f"{path}: metadata sidecar missing or not a segmenter checkpoint")
        shape = tuple(meta["image_shape"]) if meta.get("image_shape") else None
        return cls(SegConfig(**meta["config"]), nd.load_checkpoint(path), shape)


def _epoch_batches(n: int, config: SegConfig, rng: nd.Rng):
    """Yield, per epoch, the list of index batches.

    Without ``steps_per_epoch`` an epoch is one shuffled pass (last batch may
    be short).  With it, batches are cut from a stream of consecutive
    shuffled passes, so every epoch costs the same number of steps
    regardless of the training-set size.
    """
    b = config.batch_size
    if config.steps_per_epoch is None:
        epoch = 0
        while True:
            perm = rng.generator("epoch", epoch).permutation(n)
            yield [perm[s : s + b] for s in range(0, n, b)]
            epoch += 1
    buf = np.empty(0, np.int64)
    passes = 0
    while True:
        out = []
        for _ in range(config.steps_per_epoch):
            while len(buf) < b:
                buf = np.concatenate([buf, rng.generator("epoch", passes).permutation(n)])
                passes += 1
            out.append(buf[:b])
            buf = buf[b:]
        yield out


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def logits(model: Segmenter, images, batch_size: int = 64) -> np.ndarray:
    imgs = np.asarray(images, np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if model.image_shape is not None and tuple(imgs.shape[1:3]) != tuple(model.image_shape):
        raise ValueError(f"image size {imgs.shape[1:3]} does not match training size {tuple(model.image_shape)}")
    tensors = model.tensors()
    out = []
    with nd.no_grad(), nd.accumulation(np.float32):
        for sl in _batches(len(imgs), batch_size):
            out.append(segmenter_forward(imgs[sl], tensors, model.config).data)
    return np.concatenate(out)


def predict(model: Segmenter, images) -> np.ndarray:
    """Per-pixel argmax label map(s); ties resolve to the smaller class."""
    single = np.asarray(images).ndim == 3
    lab = np.argmax(logits(model, images), axis=-1).astype(np.uint8)
    return lab[0] if single else lab


def confusion_on(model: Segmenter, corpus: Corpus) -> np.ndarray:
    if len(corpus) == 0:
        raise ValueError("cannot evaluate on an empty corpus")
    pred = predict(model, corpus.images())
    k = model.config.num_classes
    return sum((metrics.confusion(p, q.mask, k) for p, q in zip(pred, corpus)), np.zeros((k, k), np.int64))


def evaluate(model: Segmenter, corpus: Corpus) -> metrics.MetricsReport:
    """One confusion matrix summed over every pixel of every pair, then IoU/F1."""
    return metrics.MetricsReport.from_confusion(confusion_on(model, corpus))


def extract_features(model: Segmenter, images, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Pooled bottleneck (FID), decoder maps (sFID) and softmax maps (IS)."""
    imgs = np.asarray(images, np.float32)
    tensors = model.tensors()
    pooled, dec, probs = [], [], []
    with nd.no_grad(), nd.accumulation(np.float32):
        for sl in _batches(len(imgs), batch_size):
            taps: dict = {}
            out = segmenter_forward(imgs[sl], tensors, model.config, taps).data.astype(np.float64)
            pooled.append(taps["bottleneck"].data.mean(axis=(1, 2)))
            dec.append(taps["decoder"].data)
            e = np.exp(out - out.max(axis=-1, keepdims=True))
            probs.append(e / e.sum(axis=-1, keepdims=True))
    return {"pooled": np.concatenate(pooled), "decoder": np.concatenate(dec), "probs": np.concatenate(probs)}


def train_segmenter(train: TrainingSet | Corpus, val: Corpus, config: SegConfig, on_epoch=None) -> tuple[Segmenter, list[dict]]:
    """Cross-entropy training (ignore pixels excluded); keeps the epoch with best val mIoU.

    Returns the best model and one log row per epoch (epoch 0 is the
    untrained initialisation).
    """
    pairs = train.pairs if isinstance(train, (TrainingSet, Corpus)) else list(train)
    if not pairs:
        raise ValueError("training set is empty")
    if len(val) == 0:
        raise ValueError("validation set is empty")
    shape = pairs[0].shape
    if val.shape != shape:
        raise ValueError(f"validation pairs are {val.shape}, training pairs {shape}")
    images = np.stack([p.image for p in pairs])
    masks = np.stack([p.mask for p in pairs])
    order_seed = train.seed if isinstance(train, TrainingSet) else config.seed
    rng = nd.Rng(config.seed)
    params = to_arrays(init_segmenter(config, rng))
    model = Segmenter(config, params, shape)
    conf = confusion_on(model, val)
    best_miou, best = metrics.iou_f1(conf).miou, dict(params)
    rows = [_log_row(0, None, conf, 0)]
    state = None
    t0 = time.perf_counter()
    batches = _epoch_batches(len(pairs), config, nd.Rng(order_seed))
    with nd.accumulation(np.float32):
        for epoch in range(1, config.epochs + 1):
            losses = []
            for step, idx in enumerate(next(batches)):
                tensors = from_arrays(params)
                out = segmenter_forward(images[idx], tensors, config)
                loss = nd.cross_entropy(out, masks[idx])
                value = float(loss.data)
                if not np.isfinite(value):
                    raise FloatingPointError(f"segmenter loss non-finite at epoch {epoch} step {step}")
                grads = nd.backward(loss, tensors)
                params, state = nd.adam_step(params, grads, state, config.lr)
                losses.append(value)
            model = Segmenter(config, params, shape)
            conf = confusion_on(model, val)
            row = _log_row(epoch, float(np.mean(losses)), conf, int((time.perf_counter() - t0) * 1000))
            rows.append(row)
            if on_epoch:
                on_epoch(row)
            log.debug("segmenter epoch %d loss %.4f val mIoU %.4f", epoch, row["loss"], row["miou"])
            if row["miou"] > best_miou:
                best_miou, best = row["miou"], dict(params)
    return Segmenter(config, best, shape), rows


def _log_row(epoch: int, loss, conf: np.ndarray, wall_ms: int) -> dict:
    s = metrics.iou_f1(conf)
    return {
        "epoch": epoch,
        "split": "val",
        "loss": loss,
        "miou": s.miou,
        "f1": s.macro_f1,
        "iou": s.iou.tolist(),
        "confusion": conf.tolist(),
        "wall_ms": wall_ms,
    }


def write_log_csv(path, rows: list[dict], num_classes: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "miou", "f1"] + [f"iou_{k}" for k in range(num_classes)])
        for r in rows:
            loss = "" if r["loss"] is None else f"{r['loss']:.6f}"
            ious = ["" if np.isnan(v) else f"{v:.6f}" for v in r["iou"]]
            w.writerow([r["epoch"], r["split"], loss, f"{r['miou']:.6f}", f"{r['f1']:.6f}"] + ious)


def best_row(rows: list[dict]) -> dict:
    best = rows[0]
    for r in rows[1:]:
        if r["miou"] > best["miou"]:
            best = r
    return best


def save_log(path, rows: list[dict], num_classes: int) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_log_csv(path, rows, num_classes)
