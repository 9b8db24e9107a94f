"""Procedural satellite-like scenes with known class statistics, and the SATP file format.

A scene is built in two passes.  A bilinear value-noise field is ranked and
cut into background classes so each image carries an exact pixel share per
background class.  Objects (rectangles or discs) are then stamped into host
regions: with probability ``p`` an object of class A lands fully inside
background class B (with a one pixel host margin), otherwise inside a
background class drawn in proportion to the raw background shares.  Raw
shares are solved so that the expected final frequencies equal the targets.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .codec import IGNORE_INDEX, LabeledPair

SATP_MAGIC = b"SATP"
SATP_VERSION = 1
_HEADER = struct.Struct("<4sIIHHH")

DEFAULT_NAMES = ("vegetation", "water", "bareland", "building", "tree", "vehicle")
DEFAULT_COLORS = (
    (0.30, 0.46, 0.22),
    (0.16, 0.26, 0.42),
    (0.58, 0.50, 0.36),
    (0.66, 0.60, 0.54),
    (0.20, 0.36, 0.17),
    (0.78, 0.30, 0.26),
)


@dataclass(frozen=True)
class ObjectRule:
    cls: int
    shape: str  # "rect" or "disc"
    min_size: int  # rect side / disc radius
    max_size: int
    host: int
    p_host: float
    freq: float

    def __post_init__(self):
        if self.shape not in ("rect", "disc"):
            raise ValueError(f"object shape must be rect or disc, got {self.shape!r}")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError(f"bad object size range {self.min_size}..{self.max_size}")
        if not 0.0 <= self.p_host <= 1.0:
            raise ValueError(f"p_host must lie in [0, 1], got {self.p_host}")

    def mean_area(self) -> float:
        sizes = np.arange(self.min_size, self.max_size + 1)
        if self.shape == "rect":
            return float(np.mean(sizes) ** 2)
        return float(np.mean([_disc(r).sum() for r in sizes]))


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines the scene distribution."""

    num_classes: int = 6
    size: int = 32
    cell: int = 8
    background: tuple[tuple[int, float], ...] = ((1, 0.20), (0, 0.38), (2, 0.25))
    objects: tuple[ObjectRule, ...] = (
        ObjectRule(3, "rect", 3, 6, host=2, p_host=1.0, freq=0.10),
        ObjectRule(4, "disc", 1, 2, host=0, p_host=0.8, freq=0.06),
        ObjectRule(5, "rect", 1, 2, host=2, p_host=0.5, freq=0.01),
    )
    colors: tuple[tuple[float, float, float], ...] = DEFAULT_COLORS
    jitter: float = 0.06
    texture: float = 0.05

    def __post_init__(self):
        k = self.num_classes
        if k < 2:
            raise ValueError("num_classes must be >= 2")
        classes = [c for c, _ in self.background] + [o.cls for o in self.objects]
        if len(set(classes)) != len(classes):
            raise ValueError("each class may appear once, as background or object")
        if any(not 0 <= c < k for c in classes):
            raise ValueError(f"class index out of range for K={k}")
        bg = {c for c, _ in self.background}
        for o in self.objects:
            if o.host not in bg:
                raise ValueError(f"object class {o.cls} hosted by {o.host}, which is not a background class")
        if len(self.colors) < k:
            raise ValueError(f"need {k} colours, got {len(self.colors)}")
        if any(not 0.0 <= v <= 1.0 for col in self.colors for v in col):
            raise ValueError("colours must lie in [0, 1]")
        if self.size < 4 or self.cell < 1:
            raise ValueError("size must be >= 4 and cell >= 1")
        total = sum(f for _, f in self.background) + sum(o.freq for o in self.objects)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"class frequencies sum to {total:.8f}, not 1")
        if min(self.raw_background().values(), default=1.0) <= 0:
            raise ValueError("object frequencies exceed the available host area")

    # ---- analytic statistics

    def target_frequencies(self) -> np.ndarray:
        f = np.zeros(self.num_classes)
        for c, v in self.background:
            f[c] = v
        for o in self.objects:
            f[o.cls] = o.freq
        return f

    def raw_background(self) -> dict[int, float]:
        """Background shares before objects are stamped in.

        Solves r_b = f_b + sum_A f_A (p_A [host_A = b] + (1 - p_A) r_b).
        """
        spill = sum(o.freq * (1.0 - o.p_host) for o in self.objects)
        out = {}
        for c, f in self.background:
            hosted = sum(o.freq * o.p_host for o in self.objects if o.host == c)
            out[c] = (f + hosted) / (1.0 - spill) if spill < 1 else 0.0
        return out

    def expected_cooccurrence(self) -> dict[tuple[int, int], float]:
        """Probability that an object of class A sits inside host class B."""
        raw = self.raw_background()
        return {(o.cls, o.host): o.p_host + (1.0 - o.p_host) * raw[o.host] for o in self.objects}

    # ---- key=value text form

    def to_text(self) -> str:
        lines = [
            f"num_classes = {self.num_classes}",
            f"size = {self.size}",
            f"cell = {self.cell}",
            f"jitter = {self.jitter!r}",
            f"texture = {self.texture!r}",
            "background = " + ",".join(f"{c}:{f!r}" for c, f in self.background),
        ]
        for o in self.objects:
            lines.append(f"object.{o.cls} = {o.shape} {o.min_size} {o.max_size} host={o.host} p={o.p_host!r} freq={o.freq!r}")
        for i, col in enumerate(self.colors):
            lines.append(f"color.{i} = " + " ".join(repr(v) for v in col))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        kw: dict = {}
        objects: dict[int, ObjectRule] = {}
        colors: dict[int, tuple] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key in ("num_classes", "size", "cell"):
                    kw[key] = int(val)
                elif key in ("jitter", "texture"):
                    kw[key] = float(val)
                elif key == "background":
                    kw[key] = tuple((int(c), float(f)) for c, f in (item.split(":") for item in val.split(",")))
                elif key.startswith("object."):
                    c = int(key.split(".", 1)[1])
                    parts = val.split()
                    opts = dict(p.split("=", 1) for p in parts[3:])
                    unknown = set(opts) - {"host", "p", "freq"}
                    if unknown:
                        raise ValueError(f"unknown object option(s) {sorted(unknown)}")
                    objects[c] = ObjectRule(c, parts[0], int(parts[1]), int(parts[2]), int(opts["host"]), float(opts.get("p", 1.0)), float(opts["freq"]))
                elif key.startswith("color."):
                    colors[int(key.split(".", 1)[1])] = tuple(float(v) for v in val.split())
                else:
                    raise ValueError(f"unknown key {key!r}")
            except (KeyError, IndexError, TypeError) as exc:
                raise ValueError(f"line {lineno}: malformed value for {key!r}: {val!r}") from exc
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
        if objects or "background" in kw:
            kw["objects"] = tuple(objects[c] for c in sorted(objects))
        if colors:
            base = list(DEFAULT_COLORS) + [(0.5, 0.5, 0.5)] * max(0, kw.get("num_classes", 6) - len(DEFAULT_COLORS))
            for i, col in colors.items():
                if len(col) != 3:
                    raise ValueError(f"color.{i} needs three components")
                base[i] = col
            kw["colors"] = tuple(base)
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


@dataclass
class Corpus:
    pairs: list[LabeledPair]
    num_classes: int
    seed: int | None = None
    spec: SceneSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.pairs:
            shape = self.pairs[0].shape
            for i, p in enumerate(self.pairs):
                if p.shape != shape:
                    raise ValueError(f"pair {i} has shape {p.shape}, expected {shape}")
                if np.any((p.mask >= self.num_classes) & (p.mask != IGNORE_INDEX)):
                    raise ValueError(f"pair {i} has a class >= K={self.num_classes}")

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Corpus(self.pairs[i], self.num_classes, self.seed, self.spec)
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.num_classes == other.num_classes and self.pairs == other.pairs

    @property
    def shape(self) -> tuple[int, int]:
        return self.pairs[0].shape if self.pairs else (0, 0)

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.pairs])

    def masks(self) -> np.ndarray:
        return np.stack([p.mask for p in self.pairs])


# ---------------------------------------------------------------- generation


def _disc(r: int) -> np.ndarray:
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy**2 + xx**2) <= r * r + r  # slightly fuller than the Euclidean disc


def value_noise(gen: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    lattice = gen.random((gh, gw))
    oy, ox = gen.random(2) * cell
    ys = (np.arange(h) + oy) / cell
    xs = (np.arange(w) + ox) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    # smoothstep weights hide the lattice
    fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _quantile_labels(field_: np.ndarray, classes: list[int], shares: list[float]) -> np.ndarray:
    """Assign classes to ranked field values so each gets round(share * HW) pixels."""
    n = field_.size
    order = np.argsort(field_, axis=None, kind="stable")
    bounds = np.round(np.cumsum(shares) / sum(shares) * n).astype(int)
    flat = np.empty(n, np.uint8)
    start = 0
    for c, end in zip(classes, bounds):
        flat[order[start:end]] = c
        start = end
    return flat.reshape(field_.shape)


def _window_all(ok: np.ndarray, wh: int, ww: int) -> np.ndarray:
    """Boolean map of top-left corners whose wh x ww window is entirely ``ok``."""
    ii = np.pad(ok.astype(np.int32), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    s = ii[wh:, ww:] - ii[:-wh, ww:] - ii[wh:, :-ww] + ii[:-wh, :-ww]
    return s == wh * ww


def _place_objects(gen, base: np.ndarray, spec: SceneSpec) -> np.ndarray:
    mask = base.copy()
    free = np.ones(base.shape, bool)  # pixels not yet covered by an object
    h, w = base.shape
    raw = spec.raw_background()
    bg_classes = list(raw)
    bg_p = np.array([raw[c] for c in bg_classes])
    bg_p = bg_p / bg_p.sum()
    for rule in spec.objects:
        target = rule.freq * h * w
        placed = 0
        fails = 0
        half = rule.mean_area() / 2
        while placed + half < target and fails < 50:
            size = int(gen.integers(rule.min_size, rule.max_size + 1))
            if rule.shape == "rect":
                fh, fw = size, int(gen.integers(rule.min_size, rule.max_size + 1))
                foot = np.ones((fh, fw), bool)
            else:
                foot = _disc(size)
                fh, fw = foot.shape
            host = rule.host if gen.random() < rule.p_host else bg_classes[gen.choice(len(bg_classes), p=bg_p)]
            ok = (base == host) & free
            if fh > h or fw > w:
                fails += 1
                continue
            # the margin may run off the image edge
            corners = np.argwhere(_window_all(np.pad(ok, 1, constant_values=True), fh + 2, fw + 2))
            if len(corners) == 0:
                fails += 1
                continue
            y, x = corners[gen.integers(len(corners))]
            region = mask[y : y + fh, x : x + fw]
            region[foot] = rule.cls
            free[y : y + fh, x : x + fw][foot] = False
            placed += int(foot.sum())
    return mask


def _render(gen, mask: np.ndarray, spec: SceneSpec) -> np.ndarray:
    h, w = mask.shape
    colors = np.asarray(spec.colors, np.float64)[: spec.num_classes]
    tint = gen.normal(0, 0.02, size=(spec.num_classes, 3))
    img = (colors + tint)[mask]
    tex = value_noise(gen, h, w, max(2, spec.cell // 2)) - 0.5
    img = img + spec.texture * 2 * tex[..., None]
    img = img + gen.normal(0, spec.jitter, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_scene(spec: SceneSpec, gen: np.random.Generator) -> LabeledPair:
    raw = spec.raw_background()
    classes = [c for c, _ in spec.background]
    field_ = value_noise(gen, spec.size, spec.size, spec.cell)
    base = _quantile_labels(field_, classes, [raw[c] for c in classes])
    mask = _place_objects(gen, base, spec)
    return LabeledPair(_render(gen, mask, spec), mask)


def gen_corpus(spec: SceneSpec, n: int, seed: int) -> Corpus:
    """``n`` scenes; scene ``i`` draws from stream ``("scene", i)`` so prefixes agree across ``n``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = nd.Rng(seed)
    pairs = [gen_scene(spec, rng.generator("scene", i)) for i in range(n)]
    return Corpus(pairs, spec.num_classes, seed, spec)


# ---------------------------------------------------------------- patches and resizing


def extract_patches(image, mask, patch: int) -> list[LabeledPair]:
    if patch <= 0:
        raise ValueError(f"patch must be positive, got {patch}")
    image, mask = np.asarray(image), np.asarray(mask)
    h, w = mask.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    out = []
    for y in range(0, h - patch + 1, patch):
        for x in range(0, w - patch + 1, patch):
            out.append(LabeledPair(image[y : y + patch, x : x + patch].copy(), mask[y : y + patch, x : x + patch].copy()))
    return out


def downsample_pair(pair: LabeledPair) -> LabeledPair:
    """Half resolution: 2x2 mean for the image, top-left subsampling for the mask."""
    h, w = pair.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsampling needs even dims, got {h}x{w}")
    img = pair.image.astype(np.float64).reshape(h // 2, 2, w // 2, 2, 3).mean(axis=(1, 3))
    return LabeledPair(img.astype(np.float32), pair.mask[::2, ::2].copy())


def downsample_corpus(corpus: Corpus) -> Corpus:
    return Corpus([downsample_pair(p) for p in corpus], corpus.num_classes, corpus.seed, corpus.spec)


# ---------------------------------------------------------------- SATP format


def satp_size(n: int, h: int, w: int) -> int:
    return _HEADER.size + n * (h * w * 3 * 4 + h * w)


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    h, w = corpus.shape
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(SATP_MAGIC, SATP_VERSION, len(corpus), h, w, corpus.num_classes))
        for p in corpus:
            f.write(np.ascontiguousarray(p.image, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(p.mask, dtype=np.uint8).tobytes())
    tmp.replace(path)


class FormatError(ValueError):
    pass


def load_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, n, h, w, k = _HEADER.unpack_from(data)
    if magic != SATP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {SATP_MAGIC!r}")
    if version != SATP_VERSION:
        raise FormatError(f"{path}: unsupported SATP version {version}")
    expected = satp_size(n, h, w)
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise FormatError(f"{path}: {kind} payload, {len(data)} bytes, expected {expected}")
    pairs = []
    off = _HEADER.size
    isz = h * w * 3 * 4
    for _ in range(n):
        img = np.frombuffer(data, dtype="<f4", count=h * w * 3, offset=off).reshape(h, w, 3).astype(np.float32)
        off += isz
        m = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).copy()
        off += h * w
        pairs.append(LabeledPair(img, m))
    try:
        return Corpus(pairs, k)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
