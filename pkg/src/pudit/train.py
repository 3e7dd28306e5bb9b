"""Two-phase training.

Phase 1 pretrains the backbone on synthetic clips with the plain
flow-matching loss. Phase 2 freezes it, attaches one adapter per block
(attention weights copied from the host block) and trains only adapter
parameters on single-frame edit pairs.

All randomness for step ``s`` is drawn from generators keyed on
``(seed, stream, s)``, so resuming at any step reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngs
from .backbone import Backbone, DiTConfig
from .checkpoint import load_checkpoint, save_checkpoint, tensor_digest
from .errors import FrozenParamDrift, IncompatibleShapes, NonFiniteLoss, ShapeMismatch
from .flow import fm_loss, interpolate, to_model_space
from .nn import Module
from .predict_update import AblationMode, EditModel
from .tensor import Tensor, backward, get_tape, no_grad

log = logging.getLogger(__name__)

PRETRAIN = "pretrain"
EDIT = "edit"


@dataclass
class TrainConfig:
    phase: str = EDIT
    learning_rate: float = 1e-5
    batch_size: int = 16
    epochs: int = 5
    steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ablation: str = AblationMode.FULL.value
    log_every: int = 25
    checkpoint: str | None = None
    frame_schedule: tuple[int, ...] = (1, 2, 4, 8)
    eval_every: int = 500
    max_steps: int | None = None

    def __post_init__(self):
        if self.phase not in (PRETRAIN, EDIT):
            raise ValueError(f"phase must be {PRETRAIN!r} or {EDIT!r}")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.ablation = AblationMode.parse(self.ablation).value
        self.frame_schedule = tuple(int(f) for f in self.frame_schedule)

    @classmethod
    def pretrain(cls, **overrides) -> "TrainConfig":
        base = dict(phase=PRETRAIN, learning_rate=3e-4, steps=3000, log_every=50)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def edit(cls, **overrides) -> "TrainConfig":
        base = dict(phase=EDIT)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frame_schedule"] = list(self.frame_schedule)
        return d

    def portable_dict(self) -> dict:
        """Fields that define the run; output location and stop point are left out."""
        d = self.to_dict()
        d.pop("checkpoint", None)
        d.pop("max_steps", None)
        return d

    def digest(self) -> str:
        d = self.portable_dict()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update (step index ``t`` starts at 1); returns new (param, m, v)."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeMismatch(f"adam shapes differ: {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    f = param.dtype.type
    b1, b2 = f(beta1), f(beta2)
    m = b1 * m + (f(1) - b1) * grad
    v = b2 * v + (f(1) - b2) * (grad * grad)
    mhat = m / f(1.0 - beta1**t)
    vhat = v / f(1.0 - beta2**t)
    param = param - f(lr) * mhat / (np.sqrt(vhat) + f(eps))
    return param.astype(param.dtype), m, v


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[name], self.v[name] = adam_step(p.data, g.astype(p.dtype), self.m[name], self.v[name], self.t,
                                                           c.learning_rate, c.beta1, c.beta2, c.eps)
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for n in self.params:
            self.m[n] = np.array(tensors[f"adam.m.{n}"], dtype=np.float32)
            self.v[n] = np.array(tensors[f"adam.v.{n}"], dtype=np.float32)
        self.t = t


# ---------------------------------------------------------------------------
# Parameter partition
# ---------------------------------------------------------------------------


class ParamPartition:
    """Frozen/trainable registry with digests of the frozen set."""

    def __init__(self, model: Module, trainable_prefixes: tuple[str, ...]):
        self.frozen: dict[str, Tensor] = {}
        self.trainable: dict[str, Tensor] = {}
        for name, p in model.named_parameters():
            if name.startswith(trainable_prefixes):
                p.requires_grad = True
                self.trainable[name] = p
            else:
                p.requires_grad = False
                p.grad = None
                self.frozen[name] = p
        self.snapshot = self.digests()

    def digests(self) -> dict[str, str]:
        return {n: tensor_digest(p.data) for n, p in self.frozen.items()}

    def verify(self) -> None:
        now = self.digests()
        drifted = [n for n in self.snapshot if now.get(n) != self.snapshot[n]]
        if drifted:
            raise FrozenParamDrift(f"frozen tensors changed: {drifted[:5]}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _model_tensors(model: Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{n}": p.data for n, p in model.named_parameters()}


def save_training_state(path, model: Module, optimizer: Adam, cfg: TrainConfig, dit: DiTConfig, step: int,
                        history: dict, kind: str) -> Path:
    tensors = _model_tensors(model, "model.")
    tensors.update(optimizer.state_tensors())
    meta = {
        "kind": kind,
        "config": cfg.portable_dict(),
        "config_digest": cfg.digest(),
        "dit_config": dit.to_dict(),
        "mode": cfg.ablation if kind == EDIT else None,
        "step": step,
        "optimizer_step": optimizer.t,
        "rng": {"algorithm": "PCG64 via SeedSequence([seed, stream, step])", "seed": cfg.seed, "next_step": step},
        "history": history,
    }
    return save_checkpoint(path, tensors, meta)


@dataclass
class TrainState:
    model: Module
    optimizer: Adam
    config: TrainConfig
    step: int = 0
    history: dict = field(default_factory=dict)


def load_backbone(path, dit: DiTConfig | None = None) -> Backbone:
    """Backbone weights from a phase-1 or phase-2 checkpoint."""
    tensors, meta = load_checkpoint(path)
    cfg = DiTConfig(**meta["dit_config"]) if dit is None else dit
    bb = Backbone(cfg)
    own = dict(bb.named_parameters())
    prefix = "model." if meta["kind"] == PRETRAIN else "model.backbone."
    for name, p in own.items():
        key = prefix + name
        if key not in tensors:
            raise IncompatibleShapes(f"checkpoint lacks backbone tensor {name!r}")
        if tensors[key].shape != p.shape:
            raise IncompatibleShapes(f"{name}: checkpoint shape {tensors[key].shape} vs model {p.shape}")
        p.data = np.array(tensors[key], dtype=np.float32)
    return bb


def attach_and_inherit(backbone: Backbone | str | Path, mode=AblationMode.FULL, seed: int = 0) -> EditModel:
    """Frozen backbone plus freshly attached adapters (attention weights copied per block)."""
    if not isinstance(backbone, Backbone):
        backbone = load_backbone(backbone)
    model = EditModel(backbone, mode=mode, seed=seed, inherit=True)
    ParamPartition(model, ("adapters.",))
    return model


def load_edit_state(path) -> TrainState:
    tensors, meta = load_checkpoint(path)
    if meta["kind"] != EDIT:
        raise IncompatibleShapes(f"{path} is a {meta['kind']} checkpoint, expected an edit checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    bb = Backbone(DiTConfig(**meta["dit_config"]))
    model = EditModel(bb, mode=cfg.ablation, seed=cfg.seed, inherit=True)
    model.load_state_dict({n[len("model."):]: a for n, a in tensors.items() if n.startswith("model.")})
    part = ParamPartition(model, ("adapters.",))
    opt = Adam(list(part.trainable.items()), cfg)
    opt.load_state(tensors, meta["optimizer_step"])
    return TrainState(model, opt, cfg, meta["step"], meta["history"])


def load_pretrain_state(path) -> TrainState:
    tensors, meta = load_checkpoint(path)
    if meta["kind"] != PRETRAIN:
        raise IncompatibleShapes(f"{path} is not a pretraining checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    bb = load_backbone(path)
    bb.requires_grad_(True)
    opt = Adam(list(bb.named_parameters()), cfg)
    opt.load_state(tensors, meta["optimizer_step"])
    return TrainState(bb, opt, cfg, meta["step"], meta["history"])


# ---------------------------------------------------------------------------
# Phase 1
# ---------------------------------------------------------------------------


def _clip_batch(clips, idx, offsets, frames) -> tuple[np.ndarray, np.ndarray]:
    video = np.stack([clips[i].frames[o : o + frames] for i, o in zip(idx, offsets)])
    ids = np.stack([clips[i].caption for i in idx])
    return to_model_space(video), ids


def heldout_loss(backbone: Backbone, clips, seed: int, schedule=(1, 2, 4, 8), batch: int = 16) -> float:
    """Deterministic held-out FM loss: clip ``j`` uses ``schedule[j % len]`` frames and fixed noise/time."""
    total, count = 0.0, 0
    with no_grad():
        for frames in schedule:
            sel = [j for j in range(len(clips)) if schedule[j % len(schedule)] == frames]
            for start in range(0, len(sel), batch):
                chunk = sel[start : start + batch]
                x1, ids = _clip_batch(clips, chunk, [0] * len(chunk), frames)
                x0 = np.stack([rngs.generator(seed, rngs.PRETRAIN_EVAL, j).standard_normal(x1.shape[1:]) for j in chunk]).astype(np.float32)
                t = np.array([rngs.generator(seed, rngs.PRETRAIN_EVAL, j, 1).random() for j in chunk])
                loss = fm_loss(backbone, interpolate(x0, x1, t), ids)
                total += loss.item() * len(chunk)
                count += len(chunk)
    return total / count


def pretrain_backbone(cfg: TrainConfig, clips, heldout_clips, dit: DiTConfig = DiTConfig(),
                      state: TrainState | None = None) -> TrainState:
    """Phase 1. Every step draws a frame count from ``frame_schedule`` and
    ``max(1, batch_size // F)`` clip windows of that length."""
    if cfg.phase != PRETRAIN:
        raise ValueError("pretrain_backbone needs a pretrain config")
    if state is None:
        bb = Backbone(dit, seed=cfg.seed)
        bb.requires_grad_(True)
        state = TrainState(bb, Adam(list(bb.named_parameters()), cfg), cfg, 0,
                           {"loss": [], "heldout": [[0, heldout_loss(bb, heldout_clips, cfg.seed, cfg.frame_schedule)]]})
    bb, opt, hist = state.model, state.optimizer, state.history
    end = cfg.steps if cfg.max_steps is None else min(cfg.steps, cfg.max_steps)
    n_frames_total = clips[0].frames.shape[0]
    for step in range(state.step, end):
        frames = cfg.frame_schedule[step % len(cfg.frame_schedule)]
        n = max(1, cfg.batch_size // frames)
        r = rngs.generator(cfg.seed, rngs.PRETRAIN_BATCH, step)
        idx = r.choice(len(clips), size=n, replace=False)
        offsets = r.integers(0, n_frames_total - frames + 1, size=n)
        x1, ids = _clip_batch(clips, idx, offsets, frames)
        nr = rngs.generator(cfg.seed, rngs.PRETRAIN_NOISE, step)
        t = nr.random(n)
        x0 = nr.standard_normal(x1.shape).astype(np.float32)
        loss = fm_loss(bb, interpolate(x0, x1, t), ids)
        value = loss.item()
        if not math.isfinite(value):
            get_tape().clear()
            raise NonFiniteLoss(f"non-finite loss at step {step}")
        backward(loss)
        opt.step()
        hist["loss"].append(value)
        state.step = step + 1
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            hist["heldout"].append([step + 1, heldout_loss(bb, heldout_clips, cfg.seed, cfg.frame_schedule)])
            log.info("pretrain step %d loss %.4f heldout %.4f", step + 1, value, hist["heldout"][-1][1])
        elif (step + 1) % cfg.log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, value)
        if cfg.checkpoint and (step + 1) % cfg.eval_every == 0:
            save_training_state(cfg.checkpoint, bb, opt, cfg, bb.cfg, state.step, hist, PRETRAIN)
    if cfg.checkpoint:
        save_training_state(cfg.checkpoint, bb, opt, cfg, bb.cfg, state.step, hist, PRETRAIN)
    return state


# ---------------------------------------------------------------------------
# Phase 2
# ---------------------------------------------------------------------------


def steps_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def edit_batch(pairs, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(source, target, src_ids, edit_ids) in model space with a unit frame axis."""
    src = to_model_space(np.stack([pairs[i].src_image for i in idx]))[:, None]
    tgt = to_model_space(np.stack([pairs[i].edit_image for i in idx]))[:, None]
    return src, tgt, np.stack([pairs[i].src_prompt for i in idx]), np.stack([pairs[i].edit_prompt for i in idx])


def _check_gates(records: list[dict], mode: AblationMode, step: int) -> tuple[float, float]:
    lo, hi = 1.0, 0.0
    for rec in records:
        g = rec.get("gate")
        if g is None:
            continue
        lo, hi = min(lo, float(g.min())), max(hi, float(g.max()))
        if mode is AblationMode.NO_TEXT_GATE:
            if not np.all(g == 1.0):
                raise AssertionError(f"step {step}: disabled gate is not all ones")
        elif not (np.all(g > 0.0) and np.all(g < 1.0)):
            raise AssertionError(f"step {step}: gate left (0, 1)")
    return lo, hi


def new_edit_state(model: EditModel, cfg: TrainConfig) -> TrainState:
    part = ParamPartition(model, ("adapters.",))
    return TrainState(model, Adam(list(part.trainable.items()), cfg), cfg, 0,
                      {"loss": [], "gate_range": [], "frozen_digest": _frozen_digest(part)})


def _frozen_digest(part: ParamPartition) -> str:
    return hashlib.sha256(json.dumps(part.snapshot, sort_keys=True).encode()).hexdigest()


def train_edit(cfg: TrainConfig, pairs, model: EditModel | None = None, state: TrainState | None = None) -> TrainState:
    """Phase 2 on F=1 pairs: stacked [source; target] batches, target-only loss,
    Adam on adapter parameters; frozen digests re-checked every ``log_every`` steps."""
    if cfg.phase != EDIT:
        raise ValueError("train_edit needs an edit config")
    if state is None:
        if model is None:
            raise ValueError("need a model or a state to resume")
        state = new_edit_state(model, cfg)
    model, opt, hist = state.model, state.optimizer, state.history
    part = ParamPartition(model, ("adapters.",))
    if _frozen_digest(part) != hist["frozen_digest"]:
        raise FrozenParamDrift("backbone differs from the one this run started with")
    mode = AblationMode.parse(cfg.ablation)
    spe = steps_per_epoch(len(pairs), cfg.batch_size)
    total = cfg.epochs * spe
    end = total if cfg.max_steps is None else min(total, cfg.max_steps)
    for step in range(state.step, end):
        epoch, within = divmod(step, spe)
        perm = rngs.generator(cfg.seed, rngs.EDIT_SHUFFLE, epoch).permutation(len(pairs))
        idx = perm[within * cfg.batch_size : (within + 1) * cfg.batch_size]
        src, x1, src_ids, edit_ids = edit_batch(pairs, idx)
        nr = rngs.generator(cfg.seed, rngs.EDIT_NOISE, step)
        t = nr.random(len(idx))
        x0 = nr.standard_normal(x1.shape).astype(np.float32)
        records: list[dict] = []
        loss = fm_loss(lambda *a: model(*a, records=records), interpolate(x0, x1, t), (src_ids, edit_ids), source=src)
        value = loss.item()
        if not math.isfinite(value):
            get_tape().clear()
            raise NonFiniteLoss(f"non-finite loss at step {step}")
        backward(loss)
        opt.step()
        hist["loss"].append(value)
        state.step = step + 1
        if (step + 1) % cfg.log_every == 0 or step + 1 == total:
            part.verify()
            lo, hi = _check_gates(records, mode, step)
            hist["gate_range"].append([step + 1, lo, hi])
            log.info("edit step %d/%d loss %.4f gate [%.3f, %.3f]", step + 1, total, value, lo, hi)
    part.verify()
    if cfg.checkpoint:
        save_training_state(cfg.checkpoint, model, opt, cfg, model.backbone.cfg, state.step, hist, EDIT)
    return state


def window_means(losses, window: int = 50) -> tuple[float, float]:
    """Mean of the first and last ``window`` losses."""
    losses = np.asarray(losses, dtype=np.float64)
    w = max(1, min(window, len(losses)))
    return float(losses[:w].mean()), float(losses[-w:].mean())
