"""Joint 2D spatial interaction over stacked source/target streams.

Layout conventions (row-major throughout):

* streams are stacked ``[source; target]`` on the leading axis, so rows
  ``[0, B)`` are source and ``[B, 2B)`` are target;
* a stream sequence of length ``F*H*W`` is frame-major then raster order;
* folding time puts frame ``f`` of batch ``b`` at folded index ``b*F + f``;
* the width-wise join places source columns at ``[0, W)`` and target
  columns at ``[W, 2W)``.

Attention inside :func:`phi` only ever sees the ``2*H*W`` tokens of one
folded frame, so no information crosses frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .errors import ShapeMismatch
from .tensor import Tensor, concat, reshape, split


@dataclass(frozen=True)
class TokenGrid:
    B: int
    F: int
    H: int
    W: int
    d: int

    def __post_init__(self):
        for name in ("B", "F", "H", "W", "d"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"TokenGrid.{name} must be >= 1")

    @property
    def seq_len(self) -> int:
        return self.F * self.H * self.W

    @property
    def stacked_shape(self) -> tuple[int, int, int]:
        return (2 * self.B, self.seq_len, self.d)

    def check(self, x: Tensor) -> None:
        if x.shape != self.stacked_shape:
            raise ShapeMismatch(f"expected stacked tokens {self.stacked_shape}, got {x.shape}")


def split_streams(x: Tensor) -> tuple[Tensor, Tensor]:
    if x.ndim < 1 or x.shape[0] % 2:
        raise ShapeMismatch(f"stream split needs an even leading extent, got {x.shape}")
    src, tgt = split(x, 2, axis=0)
    return src, tgt


def stack_streams(src: Tensor, tgt: Tensor) -> Tensor:
    if src.shape != tgt.shape:
        raise ShapeMismatch(f"stream shapes differ: {src.shape} vs {tgt.shape}")
    return concat([src, tgt], axis=0)


def fold_time(x: Tensor, g: TokenGrid) -> Tensor:
    """[B, F*H*W, d] -> [B*F, H, W, d]."""
    if x.shape != (g.B, g.seq_len, g.d):
        raise ShapeMismatch(f"fold_time expects {(g.B, g.seq_len, g.d)}, got {x.shape}")
    return reshape(x, (g.B * g.F, g.H, g.W, g.d))


def unfold_time(x: Tensor, g: TokenGrid) -> Tensor:
    """[B*F, H, W, d] -> [B, F*H*W, d]."""
    if x.shape != (g.B * g.F, g.H, g.W, g.d):
        raise ShapeMismatch(f"unfold_time expects {(g.B * g.F, g.H, g.W, g.d)}, got {x.shape}")
    return reshape(x, (g.B, g.seq_len, g.d))


def widthwise_join(src: Tensor, tgt: Tensor) -> Tensor:
    if src.shape != tgt.shape or src.ndim != 4:
        raise ShapeMismatch(f"widthwise_join needs equal [N,H,W,d] inputs, got {src.shape} and {tgt.shape}")
    return concat([src, tgt], axis=2)


def widthwise_split(m: Tensor) -> tuple[Tensor, Tensor]:
    if m.ndim != 4 or m.shape[2] % 2:
        raise ShapeMismatch(f"widthwise_split needs [N,H,2W,d], got {m.shape}")
    src, tgt = split(m, 2, axis=2)
    return src, tgt


SequenceMap = Callable[[Tensor], Tensor]


def phi(x: Tensor, g: TokenGrid, attn: SequenceMap) -> Tensor:
    """Apply ``attn`` jointly to each frame's source and target tokens.

    ``attn`` receives ``[B*F, 2*H*W, d]`` and must return the same shape.
    """
    g.check(x)
    src, tgt = split_streams(x)
    joined = widthwise_join(fold_time(src, g), fold_time(tgt, g))
    seq = reshape(joined, (g.B * g.F, 2 * g.H * g.W, g.d))
    out = attn(seq)
    if out.shape != seq.shape:
        raise ShapeMismatch(f"attention changed shape {seq.shape} -> {out.shape}")
    joined_out = reshape(out, (g.B * g.F, g.H, 2 * g.W, g.d))
    src_out, tgt_out = widthwise_split(joined_out)
    return stack_streams(unfold_time(src_out, g), unfold_time(tgt_out, g))
