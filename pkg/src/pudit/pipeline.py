"""End-to-end orchestration shared by the CLI and the acceptance suite.

Each ``run_*`` function takes plain inputs, writes its artifacts under
``out`` and returns a report dict (without timestamp).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as synth
from . import evaluate as ev
from .backbone import DiTConfig
from .checkpoint import file_digest
from .flow import SamplerConfig
from .predict_update import AblationMode, EditModel
from .storage import dataset_digest, read_dataset, write_dataset
from .train import (TrainConfig, attach_and_inherit, load_backbone, load_edit_state, load_pretrain_state,
                    pretrain_backbone, train_edit, window_means)

log = logging.getLogger(__name__)

BACKBONE_FILE = "backbone.ckpt"
EDIT_FILE = "edit.ckpt"


@dataclass
class EvalSettings:
    n_pairs: int = 50
    n_temporal: int = 16
    frames: tuple[int, ...] = (2, 4, 8)
    sampler_steps: int = 32
    audit_samples: int = 5
    seed: int = 0

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.sampler_steps)

    def to_dict(self) -> dict:
        return {"n_pairs": self.n_pairs, "n_temporal": self.n_temporal, "frames": list(self.frames),
                "sampler_steps": self.sampler_steps, "audit_samples": self.audit_samples, "seed": self.seed}


@dataclass
class PipelineConfig:
    """Sizes for one full run: data, phase 1, phase 2 and evaluation."""

    seed: int = 0
    n_clips: int = 1000
    n_heldout_clips: int = 64
    n_pairs: int = 2000
    pretrain: TrainConfig = field(default_factory=TrainConfig.pretrain)
    edit: TrainConfig = field(default_factory=TrainConfig.edit)
    dit: DiTConfig = field(default_factory=DiTConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n_clips": self.n_clips, "n_heldout_clips": self.n_heldout_clips,
                "n_pairs": self.n_pairs, "pretrain": self.pretrain.portable_dict(), "edit": self.edit.portable_dict(),
                "dit": self.dit.to_dict(), "evaluation": self.evaluation.to_dict()}


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def generate(kind: str, n: int, seed: int, frames: int = 8):
    if kind == "pairs":
        return synth.build_pairs(n, seed)
    if kind == "heldout":
        return synth.build_pairs(n, seed, heldout=True)
    if kind == "clips":
        return synth.build_clips(n, seed, frames=frames)
    if kind == "heldout-clips":
        return synth.build_clips(n, seed, frames=frames, heldout=True)
    raise ValueError(f"unknown dataset kind {kind!r}; expected pairs, heldout, clips or heldout-clips")


def run_gen_data(out, kind: str, n: int, seed: int, frames: int = 8) -> dict:
    samples = generate(kind, n, seed, frames)
    config = {"kind": kind, "n": n, "seed": seed, "frames": frames if "clips" in kind else 1}
    report_extra = {}
    if kind in ("pairs", "heldout"):
        samples, filt = synth.filter_pairs(samples)
        report_extra["filter"] = filt
    write_dataset(out, samples, config)
    metrics = {"records": len(samples), "dataset_digest": dataset_digest(out), **report_extra}
    return ev.build_report("gen-data", config, None, metrics, seed=seed)


def load_or_generate(path, kind: str, n: int, seed: int, frames: int = 8):
    if path:
        samples, _ = read_dataset(path)
        return samples, dataset_digest(path)
    samples = generate(kind, n, seed, frames)
    if kind in ("pairs", "heldout"):
        samples, _ = synth.filter_pairs(samples)
    return samples, None


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def run_pretrain(out, cfg: TrainConfig, clips, heldout_clips, dit: DiTConfig = DiTConfig(), resume: str | None = None) -> dict:
    out = Path(out)
    ckpt = str(out / BACKBONE_FILE)
    cfg = replace(cfg, checkpoint=ckpt)
    state = None
    if resume:
        state = load_pretrain_state(resume)
        state.config = cfg
    state = pretrain_backbone(cfg, clips, heldout_clips, dit, state)
    held = state.history["heldout"]
    metrics = {"steps": state.step, "final_loss": state.history["loss"][-1] if state.history["loss"] else None,
               "heldout_initial": held[0][1], "heldout_final": held[-1][1],
               "heldout_drop": 1.0 - held[-1][1] / held[0][1], "loss_curve": state.history["loss"],
               "heldout_curve": held}
    return ev.build_report("pretrain", cfg.portable_dict(), file_digest(ckpt), metrics, seed=cfg.seed)


def run_train_edit(out, cfg: TrainConfig, pairs, backbone_path=None, resume: str | None = None) -> dict:
    out = Path(out)
    ckpt = str(out / EDIT_FILE)
    if resume:
        state = load_edit_state(resume)
        state.config = cfg = replace(cfg, checkpoint=ckpt)
        state = train_edit(cfg, pairs, state=state)
    else:
        if backbone_path is None:
            raise ValueError("train-edit needs --backbone (a phase-1 checkpoint) or --resume")
        cfg = replace(cfg, checkpoint=ckpt)
        state = train_edit(cfg, pairs, model=attach_and_inherit(backbone_path, cfg.ablation, cfg.seed))
    first, last = window_means(state.history["loss"])
    metrics = {"steps": state.step, "loss_window_first": first, "loss_window_last": last,
               "loss_ratio": last / first, "loss_curve": state.history["loss"],
               "gate_range": state.history["gate_range"]}
    return ev.build_report("train-edit", cfg.portable_dict(), file_digest(ckpt), metrics, seed=cfg.seed,
                           mode=cfg.ablation)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def load_edit_model(path) -> EditModel:
    return load_edit_state(path).model


def zero_init_twin(model: EditModel, seed: int = 0) -> EditModel:
    """Fresh adapters on the same frozen backbone: the untrained reference."""
    return attach_and_inherit(model.backbone, AblationMode.FULL, seed)


def evaluate_model(model: EditModel, pairs, settings: EvalSettings, reference: EditModel | None = None,
                   temporal: bool = True) -> tuple[dict, list[dict], np.ndarray]:
    """Returns (metrics, per_sample rows, single-frame outputs)."""
    pairs = pairs[: settings.n_pairs]
    sampler = settings.sampler
    outputs = ev.run_edits(model, pairs, settings.seed, sampler)[:, 0]
    rows = ev.per_sample_metrics(outputs, pairs)
    agg = ev.aggregate(rows)
    metrics = {
        "edit_region_mse": agg["all"]["edit_region_mse"],
        "preservation_psnr": agg["all"]["preservation_psnr"],
        "per_task": agg["per_task"],
        "self_audit": ev.self_audit(outputs, pairs, rows, settings.seed, k=settings.audit_samples),
    }
    if reference is not None:
        ref_out = ev.run_edits(reference, pairs, settings.seed, sampler)[:, 0]
        ref_agg = ev.aggregate(ev.per_sample_metrics(ref_out, pairs))
        metrics["reference"] = {"edit_region_mse": ref_agg["all"]["edit_region_mse"],
                                "preservation_psnr": ref_agg["all"]["preservation_psnr"]}
        metrics["delta_edit_region_mse"] = metrics["edit_region_mse"] - ref_agg["all"]["edit_region_mse"]
    if temporal and settings.frames:
        tc = ev.eval_temporal_consistency(model, pairs[: settings.n_temporal], settings.seed, settings.frames, sampler)
        metrics["temporal_consistency"] = {f: v["temporal_consistency"] for f, v in tc.items()}
    return metrics, rows, outputs


def run_eval(out, checkpoint, pairs, settings: EvalSettings, dataset_id: str | None = None, csv: bool = False,
             ppm: bool = False) -> dict:
    out = Path(out)
    state = load_edit_state(checkpoint)
    model = state.model
    reference = zero_init_twin(model, state.config.seed)
    metrics, rows, outputs = evaluate_model(model, pairs, settings, reference)
    metrics["dataset_digest"] = dataset_id
    if csv:
        ev.write_csv(out / "per_task.csv", metrics["per_task"])
    if ppm:
        dump_grid(out / "samples.ppm", pairs[: settings.n_pairs], outputs)
    config = {"evaluation": settings.to_dict(), "train": state.config.portable_dict()}
    return ev.build_report("eval", config, file_digest(checkpoint), metrics, rows, seed=settings.seed,
                           mode=state.config.ablation)


def dump_grid(path, pairs, outputs, limit: int = 8) -> Path:
    """Rows of (source, ground truth, output)."""
    rows = [[p.src_image, p.edit_image, o] for p, o in zip(pairs[:limit], outputs[:limit])]
    return ev.write_ppm(path, ev.image_grid(rows))


def run_sample(out, checkpoint, pairs, seed: int, frames: int = 1, steps: int = 32, limit: int = 8) -> dict:
    out = Path(out)
    model = load_edit_model(checkpoint)
    pairs = pairs[:limit]
    videos = ev.run_edits(model, pairs, seed, SamplerConfig(steps), frames=frames)
    for i, video in enumerate(videos):
        for f, frame in enumerate(video):
            ev.write_ppm(out / f"sample_{i:03d}_f{f}.ppm", frame)
    dump_grid(out / "grid.ppm", pairs, videos[:, 0], limit)
    config = {"frames": frames, "steps": steps, "limit": limit}
    metrics = {"written": len(videos), "adjacent_frame_mse": [ev.adjacent_frame_mse(v) for v in videos]}
    return ev.build_report("sample", config, file_digest(checkpoint), metrics, seed=seed)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def run_ablation(out, backbone_path, cfg: TrainConfig, pairs, eval_pairs, settings: EvalSettings,
                 modes=tuple(AblationMode)) -> dict:
    """Train and evaluate every mode from the same backbone checkpoint and seed."""
    out = Path(out)
    per_mode = {}
    for mode in modes:
        mode = AblationMode.parse(mode)
        mcfg = replace(cfg, ablation=mode.value)
        train_report = run_train_edit(out / mode.value, mcfg, pairs, backbone_path)
        model = load_edit_model(out / mode.value / EDIT_FILE)
        metrics, _, _ = evaluate_model(model, eval_pairs, settings, temporal=False)
        per_mode[mode.value] = {
            "checkpoint_digest": train_report["checkpoint_digest"],
            "loss_ratio": train_report["metrics"]["loss_ratio"],
            "edit_region_mse": metrics["edit_region_mse"],
            "preservation_psnr": metrics["preservation_psnr"],
            "self_audit_passed": metrics["self_audit"]["passed"],
        }
        log.info("ablation %s: edit-region mse %.5f", mode.value, metrics["edit_region_mse"])
    ranking = sorted(per_mode, key=lambda m: per_mode[m]["edit_region_mse"])
    metrics = {"modes": per_mode, "ranking_by_edit_region_mse": ranking,
               "note": "ordering is reported for inspection only; toy scale cannot certify it"}
    config = {"train": cfg.portable_dict(), "evaluation": settings.to_dict()}
    return ev.build_report("ablate", config, file_digest(backbone_path), metrics, seed=cfg.seed)


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


def run_full(out, cfg: PipelineConfig, timings: dict | None = None) -> dict:
    """Data, phase 1, phase 2 and evaluation in one directory.

    Wall-clock seconds per stage go into ``timings`` (kept out of the report
    so reruns stay byte-identical).
    """
    out = Path(out)
    timings = {} if timings is None else timings
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    clips = synth.build_clips(cfg.n_clips, cfg.seed)
    held_clips = synth.build_clips(cfg.n_heldout_clips, cfg.seed, heldout=True)
    pairs, _ = synth.filter_pairs(synth.build_pairs(cfg.n_pairs, cfg.seed))
    held_pairs, _ = synth.filter_pairs(synth.build_pairs(cfg.evaluation.n_pairs, cfg.seed, heldout=True))
    lap("data")
    pre = run_pretrain(out, replace(cfg.pretrain, seed=cfg.seed), clips, held_clips, cfg.dit)
    lap("pretrain")
    edit = run_train_edit(out, replace(cfg.edit, seed=cfg.seed), pairs, out / BACKBONE_FILE)
    lap("train_edit")
    evaluation = run_eval(out, out / EDIT_FILE, held_pairs, replace(cfg.evaluation, seed=cfg.seed))
    lap("eval")
    metrics = {"pretrain": pre["metrics"], "train_edit": edit["metrics"], "eval": evaluation["metrics"]}
    return ev.build_report("pipeline", cfg.to_dict(), edit["checkpoint_digest"], metrics, evaluation["per_sample"],
                           seed=cfg.seed, backbone_digest=pre["checkpoint_digest"])


def source_digest() -> str:
    """Hash of the package sources; part of the cache key for stored runs."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def cached_run(root, cfg: PipelineConfig) -> tuple[Path, dict, dict]:
    """Run ``run_full`` once per (config, sources) under ``root`` and reuse it afterwards.

    Returns ``(directory, report, timings)``.
    """
    key = ev.digest_json({"config": cfg.to_dict(), "source": source_digest()})
    out = Path(root) / key
    done = out / "timings.json"
    if not done.exists():
        timings: dict = {}
        report = run_full(out, cfg, timings)
        ev.write_report(out / "report.json", report)
        done.write_text(json.dumps(timings, indent=1, sort_keys=True), encoding="utf-8")
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    return out, report, json.loads(done.read_text(encoding="utf-8"))


__all__ = ["EvalSettings", "PipelineConfig", "run_gen_data", "run_pretrain", "run_train_edit", "run_eval",
           "run_sample", "run_ablation", "run_full", "cached_run", "evaluate_model", "zero_init_twin", "load_backbone"]
