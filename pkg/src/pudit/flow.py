"""Rectified-flow objective and Euler samplers.

Noise ``x0`` sits at ``t = 0`` and data ``x1`` at ``t = 1``; the path is
``x_t = t*x1 + (1-t)*x0`` with constant target velocity ``x1 - x0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, NonFiniteState, ShapeMismatch
from .tensor import Tensor, concat, mse, no_grad


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")

    def grid(self) -> np.ndarray:
        """Left endpoints ``k / steps`` of the uniform grid on [0, 1]."""
        return np.arange(self.steps, dtype=np.float64) / self.steps


def _per_sample(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    if t.ndim == 0:
        return t.astype(x.dtype)
    if t.shape != x.shape[:1]:
        raise ShapeMismatch(f"t shape {t.shape} does not match batch {x.shape[:1]}")
    return t.astype(x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> FlowSample:
    """Straight-line interpolant; ``t`` is a scalar or one value per leading row."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs x1 {x1.shape}")
    tt = _per_sample(t, x1)
    one = x1.dtype.type(1)
    xt = tt * x1 + (one - tt) * x0
    return FlowSample(x0=x0, x1=x1, t=np.asarray(t, dtype=np.float64), xt=xt.astype(x1.dtype), u=(x1 - x0).astype(x1.dtype))


def source_target_mask(n_pairs: int, sample_shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    """Binary mask over a stacked [source; target] batch selecting target rows."""
    mask = np.zeros((2 * n_pairs,) + tuple(sample_shape), dtype=dtype)
    mask[n_pairs:] = 1
    return mask


def fm_loss(model: Callable, sample: FlowSample, prompts, source: np.ndarray | None = None) -> Tensor:
    """Flow-matching loss.

    Without ``source`` (pretraining) ``model(x_t, t, prompts)`` is scored on
    every element. With ``source`` the batch is stacked ``[source; x_t]``,
    sources get ``t = 1``, ``prompts`` is ``(src_ids, edit_ids)`` and only
    the target half enters the mean.
    """
    if source is None:
        v = model(Tensor(sample.xt), np.broadcast_to(sample.t, sample.xt.shape[:1]), prompts)
        return mse(v, Tensor(sample.u))
    source = np.asarray(source, dtype=sample.xt.dtype)
    if source.shape != sample.xt.shape:
        raise ShapeMismatch(f"source {source.shape} vs target {sample.xt.shape}")
    b = source.shape[0]
    src_ids, edit_ids = prompts
    stacked = concat([Tensor(source), Tensor(sample.xt)], axis=0)
    t_all = np.concatenate([np.ones(b), np.broadcast_to(sample.t, (b,))])
    v = model(stacked, t_all, src_ids, edit_ids)
    target = np.concatenate([np.zeros_like(sample.u), sample.u])
    return mse(v, Tensor(target), source_target_mask(b, source.shape[1:], source.dtype))


def euler_sample(model: Callable, x0: np.ndarray, prompts, cfg: SamplerConfig = SamplerConfig()) -> np.ndarray:
    """Integrate ``dx/dt = model(x, t, prompts)`` from t=0 to t=1 with forward Euler."""
    x = np.array(x0, copy=True)
    dt = x.dtype.type(1.0 / cfg.steps)
    with no_grad():
        for t in cfg.grid():
            v = model(x, np.full(x.shape[:1], t), prompts)
            v = v.data if isinstance(v, Tensor) else np.asarray(v)
            x = x + dt * v.astype(x.dtype)
            if not np.all(np.isfinite(x)):
                raise NonFiniteState(f"non-finite state at t={t:.4f}")
    return x


def edit_sample(model: Callable, source: np.ndarray, src_ids, edit_ids, cfg: SamplerConfig = SamplerConfig(),
                noise: np.ndarray | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Integrate the target stream while the source stream stays clean at ``t = 1``.

    ``source`` and the result are in model space ``[B, F, C, S, S]``.
    """
    source = np.asarray(source, dtype=np.float32)
    if noise is None:
        if rng is None:
            raise ValueError("need noise or an rng")
        noise = rng.standard_normal(source.shape).astype(source.dtype)
    b = source.shape[0]
    src = Tensor(source)

    def stacked_field(x, t, _prompts):
        t_all = np.concatenate([np.ones(b), t])
        v = model(concat([src, Tensor(x)], axis=0), t_all, src_ids, edit_ids)
        return v.data[b:]

    return euler_sample(stacked_field, noise, None, cfg)


# model space is [-1, 1]; images live in [0, 1]
def to_model_space(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, dtype=np.float32) * np.float32(2.0) - np.float32(1.0)).astype(np.float32)


def to_image_space(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float32) + np.float32(1.0)) * np.float32(0.5), 0.0, 1.0).astype(np.float32)
