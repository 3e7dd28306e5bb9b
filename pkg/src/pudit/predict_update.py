"""Predict-Update spatial difference attention with a text-driven gate.

One :class:`PUModule` runs beside each backbone block's frozen 3D
self-attention and replaces its output ``h3d`` with::

    h_2d     = phi(LN1(x), attn2d_1)
    h_pred   = h3d + zlin1(h_2d)
    h_diff   = phi(LN2(h_pred - h_2d), attn2d_2)
    G        = gate_proj(cross_attn(LN3(h_diff), C))
    h_update = h_pred + G * zlin2(h_diff)

``x`` is the block input before its self-attention norm and ``C`` is the
edited-prompt embedding for both streams. Both ``zlin`` projections start
at exactly zero, so a fresh module returns ``h3d`` unchanged.
"""

from __future__ import annotations

import enum

import numpy as np

from . import rng as rngs
from .attention import GateProjParams, MultiHeadAttentionParams, ZeroLinearParams, gate_project, mha, zero_linear
from .backbone import Backbone, DiTBlock
from .errors import InvalidMode, MissingPrompt, ShapeMismatch
from .nn import LayerNorm, Module, zeros
from .spatial import TokenGrid, phi
from .tensor import Tensor, add, mul, reshape, sub


class AblationMode(str, enum.Enum):
    FULL = "Full"
    NO_TEXT_GATE = "NoTextGate"
    NO_UPDATE = "NoUpdate"
    NAIVE_PARALLEL_2D = "NaiveParallel2D"

    @classmethod
    def parse(cls, value) -> "AblationMode":
        if isinstance(value, cls):
            return value
        for mode in cls:
            if value in (mode.value, mode.name, mode.name.lower()):
                return mode
        raise InvalidMode(f"unknown ablation mode {value!r}; expected one of {[m.value for m in cls]}")


class PUModule(Module):
    """Parameters of one adapter. Which parts exist depends on the mode."""

    def __init__(self, d: int, heads: int, grid_h: int, grid_w: int, mode: AblationMode = AblationMode.FULL,
                 rng: np.random.Generator | None = None, host: DiTBlock | None = None):
        mode = AblationMode.parse(mode)
        self.mode = mode
        if host is None and rng is None:
            raise ValueError("need either a host block to inherit from or an rng")

        def attn_copy(which: str) -> MultiHeadAttentionParams:
            if host is not None:
                return getattr(host, which).clone()
            return MultiHeadAttentionParams(d, heads, rng)

        self.ln1 = LayerNorm(d)
        self.attn2d_1 = attn_copy("attn3d")
        self.pos2d = zeros(grid_h, 2 * grid_w, d)
        self.zlin1 = ZeroLinearParams(d)
        if mode is not AblationMode.NO_UPDATE:
            self.ln2 = LayerNorm(d)
            self.attn2d_2 = attn_copy("attn3d")
            self.zlin2 = ZeroLinearParams(d)
        if mode in (AblationMode.FULL, AblationMode.NAIVE_PARALLEL_2D):
            self.ln3 = LayerNorm(d)
            self.xattn_gate = attn_copy("xattn")
            gate_rng = rng if rng is not None else rngs.generator(0, rngs.INIT_ADAPTER)
            self.gate_proj = GateProjParams(d, d, gate_rng)

    @property
    def has_gate(self) -> bool:
        return hasattr(self, "gate_proj")


def attn2d(seq: Tensor, attn: MultiHeadAttentionParams, pos2d: Tensor) -> Tensor:
    """Self-attention over joined ``[N, 2HW, d]`` sequences with the local 2D position table."""
    n, length, d = seq.shape
    if pos2d.size != length * d:
        raise ShapeMismatch(f"pos2d {pos2d.shape} does not cover sequence length {length}")
    x = seq + reshape(pos2d, (1, length, d))
    return mha(x, x, attn)


def _phi_attn(p: PUModule, which: str):
    attn = getattr(p, which)
    return lambda seq: attn2d(seq, attn, p.pos2d)


def predict_stage(x: Tensor, h3d: Tensor, g: TokenGrid, p: PUModule) -> tuple[Tensor, Tensor]:
    if x.shape != h3d.shape:
        raise ShapeMismatch(f"x {x.shape} and h3d {h3d.shape} differ")
    h_2d = phi(p.ln1(x), g, _phi_attn(p, "attn2d_1"))
    h_pred = add(h3d, zero_linear(h_2d, p.zlin1))
    return h_pred, h_2d


def update_stage(h_pred: Tensor, h_2d: Tensor, g: TokenGrid, p: PUModule) -> Tensor:
    if h_pred.shape != h_2d.shape:
        raise ShapeMismatch(f"h_pred {h_pred.shape} and h_2d {h_2d.shape} differ")
    h_res = sub(h_pred, h_2d)
    return phi(p.ln2(h_res), g, _phi_attn(p, "attn2d_2"))


def semantic_gate(h_diff: Tensor, prompt_embed: Tensor | None, p: PUModule) -> Tensor:
    if prompt_embed is None:
        raise MissingPrompt("the text gate needs prompt embeddings")
    if prompt_embed.shape[0] != h_diff.shape[0] or prompt_embed.shape[-1] != h_diff.shape[-1]:
        raise ShapeMismatch(f"prompt embedding {prompt_embed.shape} not aligned with {h_diff.shape}")
    ctx = mha(p.ln3(h_diff), prompt_embed, p.xattn_gate)
    return gate_project(ctx, p.gate_proj)


def fuse(h_pred: Tensor, h_diff: Tensor, gate: Tensor, p: PUModule) -> Tensor:
    injected = zero_linear(h_diff, p.zlin2)
    if gate.shape != injected.shape:
        raise ShapeMismatch(f"gate {gate.shape} vs residual {injected.shape}")
    return add(h_pred, mul(gate, injected))


def _unit_gate(like: Tensor) -> Tensor:
    gate = Tensor(np.ones(like.shape, dtype=like.dtype))
    assert np.all(gate.data == 1.0), "text gate must be all ones with the gate disabled"
    return gate


def pu_forward(x: Tensor, h3d: Tensor, g: TokenGrid, prompt_embed: Tensor | None, mode, p: PUModule,
               record: dict | None = None) -> Tensor:
    """Adapter output for one block under the given ablation mode.

    ``record`` (optional) receives the gate array under key ``"gate"``.
    """
    mode = AblationMode.parse(mode)
    needs_update = mode is not AblationMode.NO_UPDATE
    needs_gate = mode in (AblationMode.FULL, AblationMode.NAIVE_PARALLEL_2D)
    if (needs_update and not hasattr(p, "zlin2")) or (needs_gate and not p.has_gate):
        raise InvalidMode(f"module built for {p.mode.value} cannot run {mode.value}")

    if mode is AblationMode.NAIVE_PARALLEL_2D:
        first = phi(p.ln1(x), g, _phi_attn(p, "attn2d_1"))
        second = phi(p.ln2(x), g, _phi_attn(p, "attn2d_2"))
        diff = sub(second, first)
        gate = semantic_gate(diff, prompt_embed, p)
        if record is not None:
            record["gate"] = gate.data
        return add(add(h3d, zero_linear(first, p.zlin1)), mul(gate, zero_linear(diff, p.zlin2)))

    h_pred, h_2d = predict_stage(x, h3d, g, p)
    if mode is AblationMode.NO_UPDATE:
        return h_pred
    h_diff = update_stage(h_pred, h_2d, g, p)
    gate = _unit_gate(h_diff) if mode is AblationMode.NO_TEXT_GATE else semantic_gate(h_diff, prompt_embed, p)
    if record is not None:
        record["gate"] = gate.data
    return fuse(h_pred, h_diff, gate, p)


class EditModel(Module):
    """Frozen backbone plus one adapter per block, run on stacked [source; target] streams."""

    def __init__(self, backbone: Backbone, mode=AblationMode.FULL, seed: int = 0, inherit: bool = True):
        self.mode = AblationMode.parse(mode)
        self.backbone = backbone
        cfg = backbone.cfg
        rng = rngs.generator(seed, rngs.INIT_ADAPTER)
        self.adapters = [
            PUModule(cfg.d, cfg.heads, cfg.grid, cfg.grid, self.mode, rng=rng, host=blk if inherit else None)
            for blk in backbone.blocks
        ]

    def adapter_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("adapters.")]

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("backbone.")]

    def forward(self, video: Tensor, t, src_ids, edit_ids, records: list | None = None, taps: list | None = None) -> Tensor:
        """Velocity for a stacked ``[2B, F, C, S, S]`` batch.

        The backbone conditions source rows on ``src_ids`` and target rows
        on ``edit_ids``; the gate reads the edited prompt for both.
        """
        if src_ids is None or edit_ids is None:
            raise MissingPrompt("edit model needs source and edited prompts")
        src_ids = np.asarray(src_ids, dtype=np.int64)
        edit_ids = np.asarray(edit_ids, dtype=np.int64)
        n2, frames = video.shape[:2]
        if n2 % 2 or src_ids.shape[0] * 2 != n2 or edit_ids.shape != src_ids.shape:
            raise ShapeMismatch(f"need B source and B edit prompts for {n2} stacked streams")
        b = n2 // 2
        bb = self.backbone
        ctx = bb.encode_prompt(np.concatenate([src_ids, edit_ids]))
        gate_ctx = bb.encode_prompt(np.concatenate([edit_ids, edit_ids]))
        grid = bb.grid_for(b, frames)

        def hook(i: int, x: Tensor, h3d: Tensor) -> Tensor:
            rec = {} if records is not None else None
            out = pu_forward(x, h3d, grid, gate_ctx, self.mode, self.adapters[i], rec)
            if records is not None:
                records.append(rec)
            return out

        return bb.forward(video, t, None, hook=hook, taps=taps, prompt_embed=ctx)

    __call__ = forward

    def bare(self, video: Tensor, t, src_ids, edit_ids) -> Tensor:
        """The frozen backbone alone with the same prompt routing."""
        ids = np.concatenate([np.asarray(src_ids, dtype=np.int64), np.asarray(edit_ids, dtype=np.int64)])
        return self.backbone.forward(video, t, ids)
