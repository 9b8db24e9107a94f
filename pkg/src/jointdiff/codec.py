"""Label <-> continuous-channel encodings and the model-space affine map.

Masks are turned into ``ceil(log2 K)`` binary planes (MSB in plane 0) or,
for comparison, ``K`` one-hot planes, and stacked behind the RGB channels.
Decoding assigns each pixel the valid code nearest in squared Euclidean
distance, so non-power-of-two ``K`` never yields an out-of-range class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

IGNORE_INDEX = 255
ENCODINGS = ("bin", "onehot")


@dataclass
class LabeledPair:
    """An RGB image in [0, 1] (H, W, 3) float32 and a uint8 class map (H, W)."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledPair):
            return NotImplemented
        return (
            self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
            and self.mask.tobytes() == other.mask.tobytes()
        )

    def copy(self) -> "LabeledPair":
        return LabeledPair(self.image.copy(), self.mask.copy())


def num_bits(k: int) -> int:
    if k < 2:
        raise ValueError(f"need at least 2 classes, got K={k}")
    return math.ceil(math.log2(k))


def label_channels(k: int, encoding: str = "bin") -> int:
    if encoding == "bin":
        return num_bits(k)
    if encoding == "onehot":
        if k < 2:
            raise ValueError(f"need at least 2 classes, got K={k}")
        return k
    raise ValueError(f"unknown label encoding {encoding!r}; expected one of {ENCODINGS}")


def joint_channels(k: int, encoding: str = "bin") -> int:
    """Channel count of a packed sample: RGB plus the label planes."""
    return 3 + label_channels(k, encoding)


@lru_cache(maxsize=None)
def code_table(k: int) -> np.ndarray:
    """(K, B) float32 table whose row k is ``bin_encode(k, K)``."""
    b = num_bits(k)
    ks = np.arange(k)[:, None]
    shifts = np.arange(b - 1, -1, -1)[None, :]
    table = ((ks >> shifts) & 1).astype(np.float32)
    table.setflags(write=False)
    return table


def bin_encode(class_index: int, k: int) -> np.ndarray:
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} outside 0..{k - 1}")
    return code_table(k)[class_index].copy()


def bin_decode_nn(soft_bits, k: int) -> np.ndarray | int:
    """Index of the nearest valid code; works on (..., B) arrays or one vector.

    Ties go to the smaller class index (``argmin`` returns the first minimum).
    """
    soft = np.asarray(soft_bits, dtype=np.float64)
    table = code_table(k).astype(np.float64)
    if soft.shape[-1] != table.shape[1]:
        raise ValueError(f"expected {table.shape[1]} bit channels for K={k}, got {soft.shape[-1]}")
    d = ((soft[..., None, :] - table) ** 2).sum(axis=-1)
    idx = np.argmin(d, axis=-1)
    return int(idx) if idx.ndim == 0 else idx


def onehot_encode(class_index: int, k: int) -> np.ndarray:
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} outside 0..{k - 1}")
    out = np.zeros(k, dtype=np.float32)
    out[class_index] = 1.0
    return out


def onehot_decode_nn(soft) -> np.ndarray | int:
    idx = np.argmax(np.asarray(soft), axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx


def encode_mask(mask: np.ndarray, k: int, encoding: str = "bin") -> np.ndarray:
    """(H, W) class map -> (H, W, planes) float32."""
    mask = np.asarray(mask)
    if np.any(mask == IGNORE_INDEX):
        raise ValueError("cannot encode ignore_index pixels; only fully labeled pairs are diffused")
    if mask.size and (mask.min() < 0 or mask.max() >= k):
        raise ValueError(f"mask holds a class outside 0..{k - 1}")
    if encoding == "bin":
        return code_table(k)[mask.astype(np.int64)]
    if encoding == "onehot":
        return np.eye(k, dtype=np.float32)[mask.astype(np.int64)]
    raise ValueError(f"unknown label encoding {encoding!r}")


def decode_mask(planes: np.ndarray, k: int, encoding: str = "bin") -> np.ndarray:
    if planes.shape[-1] != label_channels(k, encoding):
        raise ValueError(f"expected {label_channels(k, encoding)} label planes for K={k}, got {planes.shape[-1]}")
    if encoding == "bin":
        return bin_decode_nn(planes, k).astype(np.uint8)
    return onehot_decode_nn(planes).astype(np.uint8)


def pack_joint(pair: LabeledPair, k: int, encoding: str = "bin") -> np.ndarray:
    """Stack RGB and label planes into an (H, W, 3 + planes) array in [0, 1]."""
    return np.concatenate([pair.image, encode_mask(pair.mask, k, encoding)], axis=-1).astype(np.float32)


def unpack_joint(sample: np.ndarray, k: int, encoding: str = "bin") -> LabeledPair:
    """Clamp to [0, 1], split off RGB and decode the label planes per pixel."""
    sample = np.asarray(sample, dtype=np.float32)
    c = joint_channels(k, encoding)
    if sample.shape[-1] != c:
        raise ValueError(f"joint sample has {sample.shape[-1]} channels, expected {c} for K={k} ({encoding})")
    sample = np.clip(sample, 0.0, 1.0)
    return LabeledPair(sample[..., :3], decode_mask(sample[..., 3:], k, encoding))


def to_model_space(v):
    """[0, 1] -> [-1, 1]."""
    return (2.0 * np.asarray(v, dtype=np.float64) - 1.0).astype(np.float32)


def from_model_space(v):
    """Clamp to [-1, 1], then map back to [0, 1]."""
    return (0.5 * (np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0) + 1.0)).astype(np.float32)
