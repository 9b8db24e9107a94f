"""Compact U-Net style noise predictor with sinusoidal timestep conditioning.

Layout for ``depth = 2``::

    in -> enc0 -> down0 -> enc1 -> down1 -> mid -> up1 (+skip1) -> dec1
       -> up0 (+skip0) -> dec0 -> out

Each ``enc``/``mid``/``dec`` block is two 3x3 convs with SiLU; the first conv
of every block receives a learned per-channel bias computed from the timestep
embedding.  Downsampling is a stride-2 conv, upsampling nearest x2 followed
by a conv.  The conditional variant adds a second input conv for the
low-resolution pair, summed with the state branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndcore as nd
from .layers import Params, add_conv, add_dense, conv, count_params, dense
from .ndcore import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    conditional: bool = False
    channel_mults: tuple[int, ...] = (1, 1, 1)

    def __post_init__(self):
        if len(self.channel_mults) != self.depth + 1:
            raise ValueError(f"channel_mults needs depth+1={self.depth + 1} entries, got {self.channel_mults}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mults]

    @property
    def input_channels(self) -> int:
        """Channels the network consumes: C, or 2C with the low-res condition."""
        return 2 * self.in_channels if self.conditional else self.in_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved ``sin, cos`` features; frequencies run geometrically from 1 to 1e-4.

    ``t`` may be a scalar or a 1-D array; the result is ``(dim,)`` or ``(N, dim)``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    ts = np.asarray(t, dtype=np.float64)
    angles = ts[..., None] * freqs
    emb = np.empty(ts.shape + (dim,), dtype=np.float64)
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb.astype(np.float32)


def _add_block(params: Params, name: str, gen, cin: int, cout: int, temb: int) -> None:
    add_conv(params, f"{name}.c1", gen, cin, cout)
    add_dense(params, f"{name}.t", gen, temb, cout)
    add_conv(params, f"{name}.c2", gen, cout, cout)


def init_denoiser(config: DenoiserConfig, rng: nd.Rng) -> Params:
    """He-uniform convs, zero biases, zero output layer."""
    gen = rng.generator("denoiser.init")
    w = config.widths
    temb = config.time_embed_dim
    p: Params = {}
    add_dense(p, "time", gen, temb, temb)
    add_conv(p, "in", gen, config.in_channels, w[0])
    if config.conditional:
        add_conv(p, "in_cond", gen, config.in_channels, w[0])
        del p["in_cond.b"]  # the state branch already carries the bias
    for lvl in range(config.depth):
        _add_block(p, f"enc{lvl}", gen, w[lvl], w[lvl], temb)
        add_conv(p, f"down{lvl}", gen, w[lvl], w[lvl + 1])
    _add_block(p, "mid", gen, w[-1], w[-1], temb)
    for lvl in reversed(range(config.depth)):
        add_conv(p, f"up{lvl}", gen, w[lvl + 1], w[lvl])
        _add_block(p, f"dec{lvl}", gen, 2 * w[lvl], w[lvl], temb)
    add_conv(p, "out", gen, w[0], config.in_channels, zero=True)
    return p


def _block(params: Params, name: str, x: Tensor, temb: Tensor, residual: bool) -> Tensor:
    h = conv(params, f"{name}.c1", x)
    tb = dense(params, f"{name}.t", temb)  # (N, cout)
    h = nd.silu(nd.add(h, nd.reshape(tb, (tb.shape[0], 1, 1, tb.shape[1]))))
    h = nd.silu(conv(params, f"{name}.c2", h))
    return nd.add(x, h) if residual else h


def denoiser_forward(state, t, params: Params, config: DenoiserConfig, features: dict | None = None) -> Tensor:
    """Predict ``(N, H, W, C)`` from ``state`` of shape ``(N, H, W, C or 2C)``.

    For the conditional variant the caller concatenates the upsampled
    condition behind the noisy state along channels.  ``H`` and ``W`` must be
    divisible by ``2**depth``.
    """
    state = nd.as_tensor(state)
    squeeze = state.ndim == 3
    if squeeze:
        state = nd.Tensor(state.data[None])
    n, h, w, c = state.shape
    if c != config.input_channels:
        raise ValueError(f"denoiser expects {config.input_channels} input channels, got {c}")
    if h % (2**config.depth) or w % (2**config.depth):
        raise ValueError(f"spatial size {h}x{w} not divisible by {2 ** config.depth}")
    ts = np.broadcast_to(np.asarray(t), (n,))
    temb = nd.silu(dense(params, "time", nd.Tensor(timestep_embedding(ts, config.time_embed_dim).astype(state.dtype))))

    if config.conditional:
        cin = config.in_channels
        x = nd.add(conv(params, "in", nd.Tensor(state.data[..., :cin])), conv(params, "in_cond", nd.Tensor(state.data[..., cin:]), bias=False))
    else:
        x = conv(params, "in", state)
    skips = []
    for lvl in range(config.depth):
        x = _block(params, f"enc{lvl}", x, temb, residual=True)
        skips.append(x)
        x = nd.silu(conv(params, f"down{lvl}", x, stride=2))
    x = _block(params, "mid", x, temb, residual=True)
    if features is not None:
        features["bottleneck"] = x
    for lvl in reversed(range(config.depth)):
        x = nd.silu(conv(params, f"up{lvl}", nd.upsample_nearest(x, 2)))
        x = _block(params, f"dec{lvl}", nd.concat([x, skips[lvl]], axis=-1), temb, residual=False)
    out = conv(params, "out", x)
    if squeeze:
        out = nd.reshape(out, out.shape[1:])
    return out


def num_parameters(config: DenoiserConfig) -> int:
    return count_params(init_denoiser(config, nd.Rng(0)))
