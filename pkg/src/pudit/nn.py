"""Parameter containers: a small ``Module`` base plus dense and norm layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layer_norm


class Module:
    """Owns Tensor parameters as attributes; sub-modules may be attributes or lists."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def to(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def requires_grad_(self, flag: bool = True) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, dtype=np.float32)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32))


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, std: float | None = None):
        if rng is None:
            self.weight = zeros(d_in, d_out)
        else:
            self.weight = normal(rng, (d_in, d_out), std if std is not None else 1.0 / np.sqrt(d_in))
        self.bias = zeros(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = ones(d)
        self.bias = zeros(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, out_std: float | None = None):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
