"""Pixel-level edit metrics and report emission.

These are toy-scale proxies: masked MSE inside the ground-truth edit
region, PSNR outside it, and adjacent-frame MSE for multi-frame output.
Masks come from the generator and are never shown to the model.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import rng as rngs
from .data import static_video
from .flow import SamplerConfig, edit_sample, to_image_space, to_model_space

REPORT_VERSION = 1
EXACT = "exact"
PROXY_NOTE = "toy-scale pixel proxies; not comparable to VLM-judge or VBench scores"


def masked_mse(output: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float | None:
    """Mean squared difference over pixels where ``mask`` is 1 (all channels)."""
    sel = np.broadcast_to(np.asarray(mask) > 0, output.shape)
    n = int(sel.sum())
    if n == 0:
        return None
    d = (np.asarray(output, dtype=np.float64) - np.asarray(target, dtype=np.float64))[sel]
    return float((d * d).sum() / n)


def psnr_from_mse(mse: float | None):
    if mse is None:
        return None
    if mse == 0.0:
        return EXACT
    return 10.0 * math.log10(1.0 / mse)


def preservation_psnr(output: np.ndarray, source: np.ndarray, mask: np.ndarray):
    """PSNR outside the mask; ``"exact"`` when identical, ``None`` when nothing lies outside."""
    return psnr_from_mse(masked_mse(output, source, 1.0 - np.asarray(mask)))


def adjacent_frame_mse(video: np.ndarray) -> float:
    """Mean over adjacent frame pairs of the per-pair MSE; 0 for a single frame."""
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 2:
        return 0.0
    d = video[1:] - video[:-1]
    return float((d * d).reshape(d.shape[0], -1).mean(axis=1).mean())


# ---------------------------------------------------------------------------
# Running the editor
# ---------------------------------------------------------------------------


def sample_noise(seed: int, index: int, shape, frames: int = 1) -> np.ndarray:
    """Per-sample starting noise, independent of batching."""
    return rngs.generator(seed, rngs.EVAL_NOISE, frames, index).standard_normal(shape).astype(np.float32)


def run_edits(model, pairs, seed: int, sampler: SamplerConfig = SamplerConfig(), frames: int = 1,
              batch: int = 50) -> np.ndarray:
    """Edited outputs in image space, ``[N, F, 3, S, S]``; sources replicated over ``frames``."""
    outs = []
    for start in range(0, len(pairs), batch):
        chunk = list(range(start, min(start + batch, len(pairs))))
        src = to_model_space(np.stack([static_video(pairs[i].src_image, frames) for i in chunk]))
        noise = np.stack([sample_noise(seed, i, src.shape[1:], frames) for i in chunk])
        src_ids = np.stack([pairs[i].src_prompt for i in chunk])
        edit_ids = np.stack([pairs[i].edit_prompt for i in chunk])
        outs.append(to_image_space(edit_sample(model, src, src_ids, edit_ids, sampler, noise=noise)))
    return np.concatenate(outs)


def per_sample_metrics(outputs: np.ndarray, pairs) -> list[dict]:
    """``outputs`` is ``[N, 3, S, S]`` (single frame)."""
    rows = []
    for i, (out, p) in enumerate(zip(outputs, pairs)):
        rows.append({
            "index": i,
            "task": p.task.kind,
            "edit_region_mse": masked_mse(out, p.edit_image, p.edit_mask),
            "preservation_psnr": preservation_psnr(out, p.src_image, p.edit_mask),
            "outside_mse": masked_mse(out, p.src_image, 1.0 - p.edit_mask),
        })
    return rows


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows: list[dict]) -> dict:
    """Mean edit-region MSE and pooled preservation PSNR, overall and per task."""
    def summary(sel):
        return {
            "count": len(sel),
            "edit_region_mse": _mean(r["edit_region_mse"] for r in sel),
            "preservation_psnr": psnr_from_mse(_mean(r["outside_mse"] for r in sel)),
        }

    tasks = sorted({r["task"] for r in rows})
    return {"all": summary(rows), "per_task": {t: summary([r for r in rows if r["task"] == t]) for t in tasks}}


def eval_edit_fidelity(model, pairs, seed: int, sampler: SamplerConfig = SamplerConfig(), reference=None,
                       outputs: np.ndarray | None = None) -> dict:
    """Masked MSE to the ground-truth edit; ``delta`` is model minus ``reference`` (negative is better)."""
    if outputs is None:
        outputs = run_edits(model, pairs, seed, sampler)[:, 0]
    rows = per_sample_metrics(outputs, pairs)
    res = {"edit_region_mse": _mean(r["edit_region_mse"] for r in rows), "per_sample": rows}
    if reference is not None:
        ref_rows = per_sample_metrics(run_edits(reference, pairs, seed, sampler)[:, 0], pairs) if not isinstance(reference, list) else reference
        ref = _mean(r["edit_region_mse"] for r in ref_rows)
        res["reference_edit_region_mse"] = ref
        res["delta"] = res["edit_region_mse"] - ref
    return res


def eval_preservation(model, pairs, seed: int, sampler: SamplerConfig = SamplerConfig(),
                      outputs: np.ndarray | None = None) -> dict:
    if outputs is None:
        outputs = run_edits(model, pairs, seed, sampler)[:, 0]
    rows = per_sample_metrics(outputs, pairs)
    return {"preservation_psnr": psnr_from_mse(_mean(r["outside_mse"] for r in rows)),
            "per_sample": [{"index": r["index"], "preservation_psnr": r["preservation_psnr"]} for r in rows]}


def eval_temporal_consistency(model, pairs, seed: int, frames=(2, 4, 8), sampler: SamplerConfig = SamplerConfig(),
                              batch: int = 8) -> dict:
    """Edit static videos (each source image repeated) and measure adjacent-frame MSE per F."""
    out = {}
    for f in frames:
        videos = run_edits(model, pairs, seed, sampler, frames=f, batch=batch)
        per = [adjacent_frame_mse(v) for v in videos]
        out[str(f)] = {"temporal_consistency": float(np.mean(per)), "per_sample": per}
    return out


# ---------------------------------------------------------------------------
# Self audit
# ---------------------------------------------------------------------------


def brute_force_metrics(output: np.ndarray, pair) -> dict:
    """Loop-level recomputation used to audit the vectorized metrics."""
    c, h, w = output.shape
    se_in = se_out = 0.0
    n_in = n_out = 0
    for y in range(h):
        for x in range(w):
            inside = pair.edit_mask[0, y, x] > 0
            for ch in range(c):
                if inside:
                    d = float(output[ch, y, x]) - float(pair.edit_image[ch, y, x])
                    se_in += d * d
                    n_in += 1
                else:
                    d = float(output[ch, y, x]) - float(pair.src_image[ch, y, x])
                    se_out += d * d
                    n_out += 1
    return {"edit_region_mse": se_in / n_in if n_in else None, "outside_mse": se_out / n_out if n_out else None}


def self_audit(outputs: np.ndarray, pairs, rows: list[dict], seed: int, k: int = 5, tol: float = 1e-9) -> dict:
    """Re-derive metrics for ``k`` randomly chosen samples by explicit loops."""
    pick = rngs.generator(seed, rngs.EVAL_NOISE, 999).choice(len(pairs), size=min(k, len(pairs)), replace=False)
    checks = []
    for i in sorted(int(j) for j in pick):
        ref = brute_force_metrics(outputs[i], pairs[i])
        ok = all(
            (ref[key] is None and rows[i][key] is None) or
            (ref[key] is not None and rows[i][key] is not None and abs(ref[key] - rows[i][key]) <= tol * max(1.0, abs(ref[key])))
            for key in ("edit_region_mse", "outside_mse")
        )
        checks.append({"index": i, "ok": bool(ok)})
    return {"checked": len(checks), "passed": all(c["ok"] for c in checks), "samples": checks}


# ---------------------------------------------------------------------------
# Reports and image dumps
# ---------------------------------------------------------------------------


def digest_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def build_report(command: str, config: dict, checkpoint_digest: str | None, metrics: dict,
                 per_sample: list | None = None, **extra) -> dict:
    report = {
        "version": REPORT_VERSION,
        "command": command,
        "config_digest": digest_json(config),
        "config": config,
        "checkpoint_digest": checkpoint_digest,
        "metrics": metrics,
        "per_sample": per_sample or [],
        "note": PROXY_NOTE,
    }
    report.update(extra)
    return report


def write_report(path, report: dict, timestamp: bool = True) -> Path:
    """JSON with sorted keys; the wall-clock time lives only in ``timestamp``."""
    report = dict(report)
    report["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat() if timestamp else None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def strip_timestamp(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timestamp"}


def write_csv(path, per_task: dict) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "count", "edit_region_mse", "preservation_psnr"])
        for task, s in sorted(per_task.items()):
            w.writerow([task, s["count"], s["edit_region_mse"], s["preservation_psnr"]])
    return path


def to_ppm_bytes(image: np.ndarray) -> bytes:
    """Binary P6 for a ``[3, H, W]`` image in [0, 1], rounded to nearest 8-bit level."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {img.shape}")
    px = np.floor(img * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_ppm(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_ppm_bytes(image))
    return path


def image_grid(rows: list[list[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Tile ``[3, H, W]`` images into one image with ``pad`` white pixels between cells."""
    h, w = rows[0][0].shape[1:]
    ncol = max(len(r) for r in rows)
    grid = np.ones((3, len(rows) * (h + pad) - pad, ncol * (w + pad) - pad), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            grid[:, i * (h + pad): i * (h + pad) + h, j * (w + pad): j * (w + pad) + w] = img
    return grid
