import itertools

import numpy as np
import pytest

from pudit.backbone import Backbone, DiTConfig, from_patches, to_patches
from pudit.errors import DomainError, MissingPrompt, ShapeMismatch
from pudit.gradcheck import check_function, tiny_config
from pudit.tensor import Tensor


@pytest.fixture(scope="module")
def small():
    cfg = DiTConfig(image_size=8, patch=2, frames_max=4, d=16, heads=2, blocks=2, mlp_ratio=2)
    return Backbone(cfg, seed=3)


def prompts(rng, n, cfg):
    return rng.integers(0, cfg.vocab, (n, cfg.prompt_len))


class TestPatches:
    def test_token_count(self):
        x = Tensor(np.zeros((1, 1, 3, 16, 16), dtype=np.float32))
        assert to_patches(x, 2).shape == (1, 64, 12)

    def test_token_gathers_pixel_block(self):
        n, f, c, s, p = 2, 3, 3, 4, 2
        video = np.arange(n * f * c * s * s, dtype=np.float64).reshape(n, f, c, s, s)
        tok = to_patches(Tensor(video), p).data
        g = s // p
        for b, fr, h, w in itertools.product(range(n), range(f), range(g), range(g)):
            expected = [video[b, fr, ch, h * p + i, w * p + j] for ch in range(c) for i in range(p) for j in range(p)]
            assert tok[b, fr * g * g + h * g + w].tolist() == expected

    def test_round_trip_bitwise(self, rng):
        video = rng.standard_normal((2, 2, 3, 8, 8)).astype(np.float32)
        back = from_patches(to_patches(Tensor(video), 2), 2, 3, 2, 4)
        assert back.data.tobytes() == video.tobytes()

    def test_indivisible(self):
        with pytest.raises(ShapeMismatch):
            to_patches(Tensor(np.zeros((1, 1, 3, 5, 5))), 2)

    def test_config_validation(self):
        with pytest.raises(ShapeMismatch):
            DiTConfig(image_size=15)
        with pytest.raises(ShapeMismatch):
            DiTConfig(d=10, heads=4)


class TestTimeEmbed:
    def test_endpoints_distinct(self, small):
        e0, e1 = small.time_embed(0.0).data, small.time_embed(1.0).data
        assert np.linalg.norm(e0 - e1) > 0

    def test_deterministic(self, small):
        assert small.time_embed(0.3).data.tobytes() == small.time_embed(0.3).data.tobytes()

    def test_domain(self, small):
        with pytest.raises(DomainError):
            small.time_embed(1.5)
        with pytest.raises(DomainError):
            small.time_embed(-0.01)

    def test_gradient(self, rng):
        bb = Backbone(tiny_config(), seed=0).to(np.float64)
        mlp = bb.time_mlp
        t = np.array([0.0, 0.37, 1.0])
        res = check_function("time_embed", lambda *_: bb.time_embed(t),
                             [mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight, mlp.fc2.bias], rng)
        assert res.rel_error < 1e-4


class TestForward:
    def test_output_shape(self, small, rng):
        x = rng.standard_normal((3, 2, 3, 8, 8)).astype(np.float32)
        out = small(Tensor(x), rng.random(3), prompts(rng, 3, small.cfg))
        assert out.shape == x.shape and out.dtype == np.float32

    def test_batch_permutation_equivariance(self, small, rng):
        x = rng.standard_normal((3, 2, 3, 8, 8))
        t = rng.random(3)
        ids = prompts(rng, 3, small.cfg)
        bb = small.to(np.float64)
        try:
            out = bb(Tensor(x), t, ids).data
            perm = [2, 0, 1]
            out_p = bb(Tensor(x[perm]), t[perm], ids[perm]).data
            np.testing.assert_allclose(out_p, out[perm], atol=1e-12)
        finally:
            small.to(np.float32)

    def test_samples_independent(self, small, rng):
        x = rng.standard_normal((3, 1, 3, 8, 8)).astype(np.float32)
        t, ids = rng.random(3), prompts(rng, 3, small.cfg)
        base = small(Tensor(x), t, ids).data
        x2 = x.copy()
        x2[1] = 0
        out = small(Tensor(x2), t, ids).data
        assert out[0].tobytes() == base[0].tobytes() and out[2].tobytes() == base[2].tobytes()
        assert np.abs(out[1] - base[1]).max() > 0

    def test_3d_attention_mixes_frames(self, small, rng):
        x = rng.standard_normal((1, 3, 3, 8, 8)).astype(np.float32)
        t, ids = rng.random(1), prompts(rng, 1, small.cfg)
        base = small(Tensor(x), t, ids).data
        x2 = x.copy()
        x2[0, 0] += 1.0
        out = small(Tensor(x2), t, ids).data
        assert np.abs(out[0, 2] - base[0, 2]).max() > 0

    def test_taps_expose_block_attention(self, small, rng):
        x = rng.standard_normal((2, 1, 3, 8, 8)).astype(np.float32)
        taps = []
        small(Tensor(x), rng.random(2), prompts(rng, 2, small.cfg), taps=taps)
        assert len(taps) == small.cfg.blocks and taps[0].shape == (2, 16, 16)

    def test_identity_hook_is_transparent(self, small, rng):
        x = rng.standard_normal((2, 1, 3, 8, 8)).astype(np.float32)
        t, ids = rng.random(2), prompts(rng, 2, small.cfg)
        a = small(Tensor(x), t, ids).data
        b = small(Tensor(x), t, ids, hook=lambda i, h, h3d: h3d).data
        assert a.tobytes() == b.tobytes()

    def test_missing_prompt(self, small, rng):
        with pytest.raises(MissingPrompt):
            small(Tensor(np.zeros((1, 1, 3, 8, 8))), [0.5], None)
        with pytest.raises(MissingPrompt):
            small(Tensor(np.zeros((2, 1, 3, 8, 8))), [0.5, 0.5], prompts(rng, 1, small.cfg))

    def test_frames_max(self, small):
        with pytest.raises(ShapeMismatch):
            small(Tensor(np.zeros((1, 5, 3, 8, 8))), [0.5], np.zeros((1, 8), dtype=int))


@pytest.fixture
def rng():
    return np.random.default_rng(5)
