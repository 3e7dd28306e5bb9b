import json

import pytest

from pudit import data as synth
from pudit import evaluate as ev
from pudit.backbone import DiTConfig
from pudit.checkpoint import file_digest
from pudit.pipeline import EvalSettings, PipelineConfig, run_ablation, run_full
from pudit.train import TrainConfig

TINY = dict(
    n_clips=8, n_heldout_clips=4, n_pairs=24,
    pretrain=TrainConfig.pretrain(steps=3, batch_size=4, frame_schedule=(1, 2), eval_every=3),
    edit=TrainConfig.edit(learning_rate=1e-3, batch_size=8, epochs=1),
    dit=DiTConfig(image_size=16, patch=4, frames_max=8, d=16, heads=2, blocks=1, mlp_ratio=2),
    evaluation=EvalSettings(n_pairs=4, n_temporal=2, frames=(2,), sampler_steps=2),
)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    rep = run_full(out, PipelineConfig(**TINY))
    ev.write_report(out / "report.json", rep)
    return out, rep


def test_artifacts(run_dir):
    out, rep = run_dir
    assert (out / "backbone.ckpt").exists() and (out / "edit.ckpt").exists()
    m = rep["metrics"]
    assert m["eval"]["self_audit"]["passed"]
    assert set(m["eval"]["temporal_consistency"]) == {"2"}
    assert rep["checkpoint_digest"] == file_digest(out / "edit.ckpt")


def test_rerun_is_byte_identical(run_dir, tmp_path):
    out, rep = run_dir
    again = run_full(tmp_path, PipelineConfig(**TINY))
    ev.write_report(tmp_path / "report.json", again)
    for name in ("backbone.ckpt", "edit.ckpt"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
    a = ev.strip_timestamp(json.loads((out / "report.json").read_text()))
    b = ev.strip_timestamp(json.loads((tmp_path / "report.json").read_text()))
    assert a == b


def test_ablation_shares_backbone(run_dir, tmp_path):
    out, _ = run_dir
    pairs, _ = synth.filter_pairs(synth.build_pairs(16, 0))
    held, _ = synth.filter_pairs(synth.build_pairs(3, 0, heldout=True))
    cfg = TrainConfig.edit(learning_rate=1e-3, batch_size=8, epochs=1)
    rep = run_ablation(tmp_path, out / "backbone.ckpt", cfg, pairs, held,
                       EvalSettings(n_pairs=3, frames=(), sampler_steps=2))
    modes = rep["metrics"]["modes"]
    assert set(modes) == {"Full", "NoTextGate", "NoUpdate", "NaiveParallel2D"}
    assert all(v["self_audit_passed"] for v in modes.values())
    assert len({v["checkpoint_digest"] for v in modes.values()}) == 4
    assert rep["checkpoint_digest"] == file_digest(out / "backbone.ckpt")
    assert sorted(rep["metrics"]["ranking_by_edit_region_mse"]) == sorted(modes)
