"""Parameter initialisation and small layer helpers shared by the networks."""

from __future__ import annotations

import math

import numpy as np

from . import ndcore as nd
from .ndcore import Tensor

Params = dict[str, Tensor]


def he_uniform(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return gen.uniform(-limit, limit, size=shape).astype(np.float32)


def add_conv(params: Params, name: str, gen, cin: int, cout: int, k: int = 3, zero: bool = False) -> None:
    shape = (k, k, cin, cout)
    w = np.zeros(shape, np.float32) if zero else he_uniform(gen, shape, k * k * cin)
    params[f"{name}.w"] = nd.parameter(w)
    params[f"{name}.b"] = nd.parameter(np.zeros(cout, np.float32))


def add_dense(params: Params, name: str, gen, din: int, dout: int, zero: bool = False) -> None:
    w = np.zeros((din, dout), np.float32) if zero else he_uniform(gen, (din, dout), din)
    params[f"{name}.w"] = nd.parameter(w)
    params[f"{name}.b"] = nd.parameter(np.zeros(dout, np.float32))


def conv(params: Params, name: str, x, stride: int = 1, bias: bool = True) -> Tensor:
    w = params[f"{name}.w"]
    y = nd.conv2d(x, w, stride=stride, pad=w.shape[0] // 2)
    return nd.add(y, params[f"{name}.b"]) if bias else y


def dense(params: Params, name: str, x) -> Tensor:
    return nd.dense(x, params[f"{name}.w"], params[f"{name}.b"])


def count_params(params: Params) -> int:
    return int(sum(p.data.size for p in params.values()))


def to_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {k: nd.parameter(np.array(v, dtype=np.float32)) for k, v in arrays.items()}


def cast_params(params: Params, dtype) -> Params:
    """Copy of ``params`` in another float dtype (float64 for gradient checks)."""
    return {k: nd.parameter(v.data.astype(dtype)) for k, v in params.items()}
