"""DDPM noise schedule, noising/denoising steps, training and sampling.

Timesteps are 1-based: ``t = 1..T``.  All closed-form maps evaluate in
float64 and return the dtype of their main input, so float64 callers get
float64-exact identities while the training/sampling paths stay float32.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import codec
from . import ndcore as nd
from .denoiser import DenoiserConfig, denoiser_forward, init_denoiser
from .layers import Params, from_arrays, to_arrays

log = logging.getLogger(__name__)

PREDICTION_MODES = ("eps", "x0")
SIGMA_MODES = ("beta", "posterior")


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t) - 1]

    def alpha_bar_prev(self, t):
        t = np.asarray(t)
        return np.where(t > 1, self.alpha_bars[np.maximum(t - 2, 0)], 1.0)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside 1..{self.T}: {t if t.ndim == 0 else t[(t < 1) | (t > self.T)][:3]}")

    def digest(self) -> str:
        return hashlib.sha256(self.betas.astype("<f8").tobytes()).hexdigest()[:16]


def schedule_from_betas(betas) -> NoiseSchedule:
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or len(b) < 1:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if np.any(b < 0) or np.any(b >= 1):
        raise ValueError("every beta must lie in [0, 1)")
    a = 1.0 - b
    return NoiseSchedule(b, a, np.cumprod(a))


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if beta_start <= 0 or beta_end >= 1 or beta_start > beta_end:
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def scaled_linear_schedule(T: int, reference_T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear schedule whose endpoints are stretched by ``reference_T / T``.

    With the T=1000 endpoints a short chain never reaches noise (at T=200,
    alpha_bar_T is about 0.13), so sampling from N(0, I) would start off the
    training distribution.  Scaling keeps sum(beta), and hence alpha_bar_T,
    close to the reference chain.
    """
    f = reference_T / T
    return linear_schedule(T, beta_start * f, min(beta_end * f, 0.999))


def _per_sample(coef, x: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-sample (N,) coefficient over (N, ...)."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def _result_dtype(x: np.ndarray):
    return np.float64 if np.asarray(x).dtype == np.float64 else np.float32


# ---------------------------------------------------------------- forward process


def forward_step(x_prev, t: int, schedule: NoiseSchedule, rng: nd.Rng, stream="forward", index: int = 0) -> np.ndarray:
    """One noising step ``sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps``."""
    schedule.check_t(t)
    x_prev = np.asarray(x_prev)
    eps = rng.generator(stream, index).standard_normal(x_prev.shape)
    b = float(schedule.beta(t))
    return (np.sqrt(1.0 - b) * x_prev.astype(np.float64) + np.sqrt(b) * eps).astype(_result_dtype(x_prev))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or per sample."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    schedule.check_t(t)
    ab = _per_sample(schedule.alpha_bar(t), x0)
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(_result_dtype(x0))


def predict_x0_from_eps(x_t, t, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    schedule.check_t(t)
    x_t = np.asarray(x_t)
    ab = _per_sample(schedule.alpha_bar(t), x_t)
    out = (x_t.astype(np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps_hat, np.float64)) / np.sqrt(ab)
    return out.astype(_result_dtype(x_t))


def predict_eps_from_x0(x_t, t, x0_hat, schedule: NoiseSchedule) -> np.ndarray:
    schedule.check_t(t)
    x_t = np.asarray(x_t)
    ab = _per_sample(schedule.alpha_bar(t), x_t)
    out = (x_t.astype(np.float64) - np.sqrt(ab) * np.asarray(x0_hat, np.float64)) / np.sqrt(1.0 - ab)
    return out.astype(_result_dtype(x_t))


# ---------------------------------------------------------------- reverse process


@dataclass(frozen=True)
class SamplerConfig:
    prediction_mode: str = "eps"
    clip_x0_each_step: bool = True
    sigma_mode: str = "beta"

    def __post_init__(self):
        if self.prediction_mode not in PREDICTION_MODES:
            raise ValueError(f"prediction_mode must be one of {PREDICTION_MODES}, got {self.prediction_mode!r}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")

    @staticmethod
    def latent_dim(schedule: NoiseSchedule, shape: tuple[int, int, int]) -> int:
        """Noise values one trajectory consumes: x_T plus one draw per step t > 1."""
        h, w, c = shape
        return schedule.T * h * w * c


def sigma(t: int, schedule: NoiseSchedule, mode: str = "beta") -> float:
    if t <= 1:
        return 0.0
    b = float(schedule.beta(t))
    if mode == "beta":
        return float(np.sqrt(b))
    return float(np.sqrt(b * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - schedule.alpha_bar(t))))


def p_step(x_t, t: int, prediction, config: SamplerConfig, schedule: NoiseSchedule, noise=None, rng: nd.Rng | None = None) -> np.ndarray:
    """Map ``x_t`` to ``x_{t-1}`` given the network output ``prediction``.

    ``prediction`` is eps-hat or x0-hat according to ``config.prediction_mode``.
    With ``clip_x0_each_step`` the implied x0-hat is clamped to [-1, 1] and
    eps-hat re-derived from it before the mean is formed.  No noise is added
    at ``t = 1``; otherwise ``noise`` (or a draw from ``rng``) is scaled by sigma_t.
    """
    schedule.check_t(t)
    x_t = np.asarray(x_t)
    pred = np.asarray(prediction, dtype=np.float64)
    if config.prediction_mode == "x0":
        x0_hat = pred
        eps_hat = None
    else:
        eps_hat = pred
        x0_hat = None
    if config.clip_x0_each_step:
        if x0_hat is None:
            x0_hat = predict_x0_from_eps(x_t.astype(np.float64), t, eps_hat, schedule)
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
        eps_hat = None
    if eps_hat is None:
        eps_hat = predict_eps_from_x0(x_t.astype(np.float64), t, x0_hat, schedule)
    b = float(schedule.beta(t))
    a = float(schedule.alpha(t))
    ab = float(schedule.alpha_bar(t))
    mean = (x_t.astype(np.float64) - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    s = sigma(t, schedule, config.sigma_mode)
    if t > 1 and s > 0:
        if noise is None:
            if rng is None:
                raise ValueError("p_step needs noise or an rng for t > 1")
            noise = rng.generator("p_step", t).standard_normal(x_t.shape)
        mean = mean + s * np.asarray(noise, dtype=np.float64)
    return mean.astype(_result_dtype(x_t))


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    lr: float = 5e-4
    seed: int = 0
    ema_decay: float | None = None
    warmup: int = 100
    grad_clip: float | None = 1.0
    accumulate: str = "float32"
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError(f"invalid training config {self}")


@dataclass
class DiffusionModel:
    """Trained denoiser plus everything needed to sample from it."""

    denoiser: DenoiserConfig
    params: dict[str, np.ndarray]
    prediction_mode: str
    schedule: NoiseSchedule
    num_classes: int
    encoding: str = "bin"
    ema: bool = False
    loss_log: list[dict] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.denoiser.in_channels

    def tensors(self) -> Params:
        return from_arrays(self.params)

    def metadata(self) -> dict:
        return {
            "kind": "denoiser",
            "denoiser": self.denoiser.to_dict(),
            "prediction_mode": self.prediction_mode,
            "num_classes": self.num_classes,
            "encoding": self.encoding,
            "ema": self.ema,
            "schedule": {"T": self.schedule.T, "betas": self.schedule.betas.tolist(), "hash": self.schedule.digest()},
        }

    def save(self, path) -> None:
        nd.save_checkpoint(path, self.params, self.metadata())

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        meta = nd.load_metadata(path)
        if meta.get("kind") != "denoiser":
            raise ValueError(f"{path}: metadata sidecar missing or not a denoiser checkpoint")
        sched = schedule_from_betas(meta["schedule"]["betas"])
        if sched.digest() != meta["schedule"]["hash"]:
            raise ValueError(f"{path}: schedule hash mismatch")
        return cls(
            DenoiserConfig.from_dict(meta["denoiser"]),
            nd.load_checkpoint(path),
            meta["prediction_mode"],
            sched,
            meta["num_classes"],
            meta.get("encoding", "bin"),
            meta.get("ema", False),
        )


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale


def train_diffusion(
    dataset: np.ndarray,
    denoiser: DenoiserConfig,
    train: TrainConfig,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    num_classes: int,
    encoding: str = "bin",
    condition: np.ndarray | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> DiffusionModel:
    """Fit the denoiser to ``dataset`` (N, H, W, C) of joint samples in [0, 1].

    Each example in a batch gets its own timestep and noise.  The target is
    the injected noise (``eps``) or the clean model-space sample (``x0``).
    With ``condition`` (N, H/2, W/2, C) the conditional variant is trained:
    the upsampled low-resolution pair is concatenated behind the noisy state.
    """
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError(f"dataset must be a non-empty (N, H, W, C) array, got {data.shape}")
    n, h, w, c = data.shape
    if c != denoiser.in_channels:
        raise ValueError(f"dataset has {c} channels, denoiser expects {denoiser.in_channels}")
    if denoiser.conditional != (condition is not None):
        raise ValueError("conditional denoiser requires a condition array (and only then)")
    x0_all = codec.to_model_space(data)
    cond_all = None
    if condition is not None:
        cond = np.asarray(condition, dtype=np.float32)
        if cond.shape != (n, h // 2, w // 2, c):
            raise ValueError(f"condition shape {cond.shape} != {(n, h // 2, w // 2, c)}")
        cond_all = codec.to_model_space(cond).repeat(2, axis=1).repeat(2, axis=2)

    rng = nd.Rng(train.seed)
    tensors = init_denoiser(denoiser, rng)
    params = to_arrays(tensors)
    ema = {k: v.copy() for k, v in params.items()} if train.ema_decay else None
    state = None
    loss_log: list[dict] = []
    t0 = time.perf_counter()
    running = []
    with nd.accumulation(np.dtype(train.accumulate).type):
        for step in range(train.steps):
            gen = rng.generator("train.batch", step)
            idx = gen.integers(0, n, size=train.batch_size)
            ts = gen.integers(1, schedule.T + 1, size=train.batch_size)
            eps = gen.standard_normal((train.batch_size, h, w, c), dtype=np.float32)
            x0 = x0_all[idx]
            x_t = q_sample(x0, ts, eps, schedule)
            if cond_all is not None:
                x_t = np.concatenate([x_t, cond_all[idx]], axis=-1)
            target = eps if sampler.prediction_mode == "eps" else x0
            tensors = from_arrays(params)
            pred = denoiser_forward(x_t, ts, tensors, denoiser)
            loss = nd.mse_loss(pred, nd.Tensor(target))
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"diffusion loss diverged (non-finite) at step {step}")
            grads = nd.backward(loss, tensors)
            if train.grad_clip:
                _clip_grads(grads, train.grad_clip)
            lr = train.lr * min(1.0, (step + 1) / train.warmup) if train.warmup else train.lr
            params, state = nd.adam_step(params, grads, state, lr)
            if ema is not None:
                d = train.ema_decay
                for k in ema:
                    ema[k] = (d * ema[k] + (1 - d) * params[k]).astype(np.float32)
            running.append(value)
            if (step + 1) % train.log_every == 0 or step + 1 == train.steps:
                rec = {"step": step + 1, "loss": float(np.mean(running)), "wall_ms": int((time.perf_counter() - t0) * 1000)}
                running = []
                loss_log.append(rec)
                if on_log:
                    on_log(rec)
                log.debug("diffusion step %d loss %.5f", rec["step"], rec["loss"])
    return DiffusionModel(
        denoiser,
        ema if ema is not None else params,
        sampler.prediction_mode,
        schedule,
        num_classes,
        encoding,
        ema is not None,
        loss_log,
    )


def write_loss_csv(path, records: list[dict]) -> None:
    lines = ["step,loss,wall_ms"] + [f"{r['step']},{r['loss']:.6f},{r['wall_ms']}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- sampling


def _check_mode(model: DiffusionModel, config: SamplerConfig) -> None:
    if config.prediction_mode != model.prediction_mode:
        raise ValueError(
            f"sampler prediction_mode {config.prediction_mode!r} does not match the "
            f"denoiser's training mode {model.prediction_mode!r}"
        )


def _reverse_chain(model: DiffusionModel, shape, n: int, config: SamplerConfig, rng: nd.Rng, stream: str, cond: np.ndarray | None, batch_size: int) -> np.ndarray:
    h, w, c = shape
    tensors = model.tensors()
    out = np.empty((n, h, w, c), dtype=np.float32)
    sch = model.schedule
    for start in range(0, n, batch_size):
        ids = range(start, min(n, start + batch_size))
        gens = [rng.generator(stream, i) for i in ids]
        x = np.stack([g.standard_normal((h, w, c), dtype=np.float32) for g in gens])
        cb = cond[start : start + len(gens)] if cond is not None else None
        with nd.no_grad(), nd.accumulation(np.float32):
            for t in range(sch.T, 0, -1):
                inp = x if cb is None else np.concatenate([x, cb], axis=-1)
                pred = denoiser_forward(inp, np.full(len(gens), t), tensors, model.denoiser).data
                noise = np.stack([g.standard_normal((h, w, c), dtype=np.float32) for g in gens]) if t > 1 else None
                x = p_step(x, t, pred, config, sch, noise=noise)
        out[start : start + len(gens)] = x
    return codec.from_model_space(out)


def sample_joint(model: DiffusionModel, n: int, shape: tuple[int, int], rng: nd.Rng, config: SamplerConfig | None = None, batch_size: int = 100) -> np.ndarray:
    """Draw ``n`` joint samples (n, H, W, C) in [0, 1].

    Sample ``i`` reads all of its noise (x_T first, then one draw per step
    t > 1) from stream ``("sample", i)``, so results do not depend on how
    samples are batched.
    """
    config = config or SamplerConfig(prediction_mode=model.prediction_mode)
    _check_mode(model, config)
    if model.denoiser.conditional:
        raise ValueError("sample_joint needs an unconditional denoiser; use sample_superres")
    return _reverse_chain(model, (shape[0], shape[1], model.channels), n, config, rng, "sample", None, batch_size)


def sample_superres(model: DiffusionModel, low_res: np.ndarray, rng: nd.Rng, config: SamplerConfig | None = None, batch_size: int = 50) -> np.ndarray:
    """Generate (n, 2H, 2W, C) samples conditioned on low-resolution joint samples."""
    config = config or SamplerConfig(prediction_mode=model.prediction_mode)
    _check_mode(model, config)
    if not model.denoiser.conditional:
        raise ValueError("sample_superres needs a conditional denoiser")
    low = np.asarray(low_res, dtype=np.float32)
    if low.ndim == 3:
        low = low[None]
    n, h, w, c = low.shape
    if c != model.channels:
        raise ValueError(f"conditioning sample has {c} channels, model expects {model.channels}")
    cond = codec.to_model_space(low).repeat(2, axis=1).repeat(2, axis=2)
    return _reverse_chain(model, (2 * h, 2 * w, c), n, config, rng, "superres", cond, batch_size)


def config_echo(*configs) -> dict:
    return {type(c).__name__: asdict(c) for c in configs}
