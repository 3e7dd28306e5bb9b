"""Tiny text-conditioned 3D diffusion transformer predicting flow velocity.

Pixel video ``[N, F, 3, S, S]`` is cut into ``patch x patch`` tiles,
embedded, given a learned per-(frame, row, col) position and a time
embedding, run through pre-norm blocks (3D self-attention over all frames
of a sample, cross-attention to the prompt, MLP) and projected back to
pixel velocity.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng as rngs
from .attention import MultiHeadAttentionParams
from .errors import DomainError, MissingPrompt, ShapeMismatch
from .nn import MLP, LayerNorm, Linear, Module, normal
from .spatial import TokenGrid
from .tensor import Tensor, embedding, narrow, permute, reshape

PAD = 0


@dataclass(frozen=True)
class DiTConfig:
    image_size: int = 16
    channels: int = 3
    patch: int = 2
    frames_max: int = 8
    d: int = 64
    heads: int = 4
    blocks: int = 4
    vocab: int = 64
    prompt_len: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ShapeMismatch("image_size must be divisible by patch")
        if self.d % self.heads:
            raise ShapeMismatch("d must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def to_patches(video: Tensor, patch: int) -> Tensor:
    """[N, F, C, S, S] -> [N, F*H*W, C*p*p], token order (f, h, w), features (c, i, j)."""
    if video.ndim != 5 or video.shape[3] % patch or video.shape[4] % patch:
        raise ShapeMismatch(f"cannot patchify {video.shape} with patch {patch}")
    n, f, c, sh, sw = video.shape
    h, w = sh // patch, sw // patch
    x = reshape(video, (n, f, c, h, patch, w, patch))
    x = permute(x, (0, 1, 3, 5, 2, 4, 6))
    return reshape(x, (n, f * h * w, c * patch * patch))


def from_patches(tokens: Tensor, frames: int, channels: int, patch: int, grid: int) -> Tensor:
    """Inverse of :func:`to_patches`."""
    n = tokens.shape[0]
    x = reshape(tokens, (n, frames, grid, grid, channels, patch, patch))
    x = permute(x, (0, 1, 4, 2, 5, 3, 6))
    return reshape(x, (n, frames, channels, grid * patch, grid * patch))


def sinusoid(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class DiTBlock(Module):
    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        d = cfg.d
        self.ln1 = LayerNorm(d)
        self.attn3d = MultiHeadAttentionParams(d, cfg.heads, rng)
        self.ln2 = LayerNorm(d)
        self.xattn = MultiHeadAttentionParams(d, cfg.heads, rng)
        self.ln3 = LayerNorm(d)
        self.mlp = MLP(d, cfg.mlp_ratio * d, rng)


# hook(block_index, block_input, h3d) -> replacement for h3d
BlockHook = Callable[[int, Tensor, Tensor], Tensor]


class Backbone(Module):
    def __init__(self, cfg: DiTConfig = DiTConfig(), seed: int = 0):
        self.cfg = cfg
        rng = rngs.generator(seed, rngs.INIT_BACKBONE)
        d = cfg.d
        self.patch_embed = Linear(cfg.patch_dim, d, rng)
        self.pos_embed = normal(rng, (cfg.frames_max, cfg.grid, cfg.grid, d), 0.05)
        self.time_mlp = MLP(d, d, rng)
        self.token_embed = normal(rng, (cfg.vocab, d), 1.0)
        self.prompt_pos = normal(rng, (cfg.prompt_len, d), 0.05)
        self.blocks = [DiTBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.final_norm = LayerNorm(d)
        self.out = Linear(d, cfg.patch_dim, rng, std=0.02)

    # -- pieces ----------------------------------------------------------
    def patchify(self, video: Tensor) -> Tensor:
        f = video.shape[1]
        if f > self.cfg.frames_max:
            raise ShapeMismatch(f"{f} frames exceeds frames_max={self.cfg.frames_max}")
        if video.shape[2:] != (self.cfg.channels, self.cfg.image_size, self.cfg.image_size):
            raise ShapeMismatch(f"video frame shape {video.shape[2:]} does not match config")
        tokens = self.patch_embed(to_patches(video, self.cfg.patch))
        pos = reshape(self._frame_pos(f), (1, f * self.cfg.tokens_per_frame, self.cfg.d))
        return tokens + pos

    def _frame_pos(self, f: int) -> Tensor:
        return narrow(self.pos_embed, 0, 0, f)

    def unpatchify(self, tokens: Tensor, frames: int) -> Tensor:
        c = self.cfg
        return from_patches(self.out(self.final_norm(tokens)), frames, c.channels, c.patch, c.grid)

    def time_embed(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
            raise DomainError(f"time values must lie in [0, 1], got {t}")
        feats = Tensor(sinusoid(t, self.cfg.d, self.pos_embed.dtype), dtype=self.pos_embed.dtype)
        return self.time_mlp(feats)

    def encode_prompt(self, ids) -> Tensor:
        if ids is None:
            raise MissingPrompt("a prompt is required for every sample")
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.cfg.prompt_len:
            raise ShapeMismatch(f"prompt ids must be [N, {self.cfg.prompt_len}], got {ids.shape}")
        return embedding(self.token_embed, ids) + self.prompt_pos

    def grid_for(self, n_streams_per_side: int, frames: int) -> TokenGrid:
        return TokenGrid(n_streams_per_side, frames, self.cfg.grid, self.cfg.grid, self.cfg.d)

    # -- full pass -------------------------------------------------------
    def forward(self, video: Tensor, t, prompt_ids, hook: BlockHook | None = None, taps: list | None = None, prompt_embed: Tensor | None = None) -> Tensor:
        """Velocity prediction ``v(x_t, t, c)`` with the same shape as ``video``.

        ``taps``, when given, receives each block's raw 3D-attention output
        before any hook replaces it.
        """
        n, f = video.shape[:2]
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if t.shape != (n,):
            raise ShapeMismatch(f"need one time value per sample: {t.shape} vs N={n}")
        if prompt_embed is None:
            if prompt_ids is None:
                raise MissingPrompt("prompt ids missing")
            if len(prompt_ids) != n:
                raise MissingPrompt(f"{len(prompt_ids)} prompts for {n} samples")
            ctx = self.encode_prompt(prompt_ids)
        else:
            ctx = prompt_embed
        h = self.patchify(video)
        h = h + reshape(self.time_embed(t), (n, 1, self.cfg.d))
        for i, blk in enumerate(self.blocks):
            h3d = blk.attn3d(blk.ln1(h))
            if taps is not None:
                taps.append(h3d)
            if hook is not None:
                h3d = hook(i, h, h3d)
            h = h + h3d
            h = h + blk.xattn(blk.ln2(h), ctx)
            h = h + blk.mlp(blk.ln3(h))
        return self.unpatchify(h, f)

    __call__ = forward
