import itertools

import numpy as np
import pytest

from pudit.attention import MultiHeadAttentionParams, mha
from pudit.errors import ShapeMismatch
from pudit.spatial import (TokenGrid, fold_time, phi, split_streams, stack_streams, unfold_time, widthwise_join,
                           widthwise_split)
from pudit.tensor import Tensor, reshape


def coded(shape):
    """Tensor whose every element is its own flat index."""
    return Tensor(np.arange(int(np.prod(shape)), dtype=np.float64).reshape(shape))


def joined_source_index(g, n, h, w, c):
    """Where element (n, h, w, c) of the joined map comes from, as an (row, token, channel) index into x."""
    b, f = divmod(n, g.F)
    if w < g.W:
        return b, f * g.H * g.W + h * g.W + w, c
    return g.B + b, f * g.H * g.W + h * g.W + (w - g.W), c


def capture_joined(x, g):
    seen = {}

    def attn(seq):
        seen["seq"] = seq.data.copy()
        return seq

    out = phi(x, g, attn)
    return out, seen["seq"].reshape(g.B * g.F, g.H, 2 * g.W, g.d)


class TestTokenGrid:
    def test_extents_positive(self):
        with pytest.raises(ShapeMismatch):
            TokenGrid(0, 1, 1, 1, 1)

    def test_check(self):
        g = TokenGrid(2, 3, 2, 2, 4)
        assert g.seq_len == 12 and g.stacked_shape == (4, 12, 4)
        with pytest.raises(ShapeMismatch):
            g.check(Tensor(np.zeros((2, 12, 4))))


class TestStreams:
    def test_known_halves(self):
        x = Tensor(np.array([[[1.0]], [[2.0]]]))
        src, tgt = split_streams(x)
        assert src.data.tolist() == [[[1.0]]] and tgt.data.tolist() == [[[2.0]]]

    def test_round_trip(self):
        x = coded((4, 6, 2))
        assert stack_streams(*split_streams(x)).data.tobytes() == x.data.tobytes()

    def test_odd_leading_extent(self):
        with pytest.raises(ShapeMismatch):
            split_streams(coded((3, 2, 2)))

    def test_index_map_enumeration(self):
        x = coded((4, 6, 2))
        src, tgt = split_streams(x)
        for b, s, c in itertools.product(range(2), range(6), range(2)):
            assert src.data[b, s, c] == (b * 6 + s) * 2 + c
            assert tgt.data[b, s, c] == ((2 + b) * 6 + s) * 2 + c


class TestFoldTime:
    def test_single_frame_is_pure_reshape(self):
        g = TokenGrid(2, 1, 2, 3, 2)
        x = coded((2, 6, 2))
        assert fold_time(x, g).data.tobytes() == x.data.tobytes()

    def test_two_frames(self):
        g = TokenGrid(1, 2, 1, 1, 1)
        out = fold_time(Tensor(np.array([[[5.0], [7.0]]])), g).data
        assert out[0, 0, 0, 0] == 5.0 and out[1, 0, 0, 0] == 7.0

    def test_index_map_enumeration(self):
        g = TokenGrid(2, 3, 2, 2, 2)
        x = coded((2, g.seq_len, 2))
        out = fold_time(x, g).data
        for b, f, h, w, c in itertools.product(range(2), range(3), range(2), range(2), range(2)):
            assert out[b * 3 + f, h, w, c] == x.data[b, f * 4 + h * 2 + w, c]
        assert unfold_time(fold_time(x, g), g).data.tobytes() == x.data.tobytes()

    def test_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            fold_time(coded((2, 5, 2)), TokenGrid(2, 3, 2, 2, 2))


class TestWidthwise:
    def test_round_trip(self):
        a, b = coded((2, 2, 3, 2)), Tensor(-coded((2, 2, 3, 2)).data)
        sa, sb = widthwise_split(widthwise_join(a, b))
        assert sa.data.tobytes() == a.data.tobytes() and sb.data.tobytes() == b.data.tobytes()

    def test_single_column(self):
        out = widthwise_join(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones((1, 2, 1, 1)))).data
        assert out[0, :, :, 0].tolist() == [[0.0, 1.0], [0.0, 1.0]]

    def test_block_pattern(self):
        out = widthwise_join(Tensor(np.full((3, 2, 4, 2), 1.0)), Tensor(np.full((3, 2, 4, 2), 2.0))).data
        for n, h, w, c in itertools.product(range(3), range(2), range(8), range(2)):
            assert out[n, h, w, c] == (1.0 if w < 4 else 2.0)

    def test_mismatch(self):
        with pytest.raises(ShapeMismatch):
            widthwise_join(coded((1, 2, 2, 1)), coded((1, 2, 3, 1)))


class TestPhi:
    @pytest.mark.parametrize("B,F,H,W", [(1, 1, 1, 1), (2, 3, 4, 4), (2, 3, 2, 3), (1, 2, 4, 1)])
    def test_index_map_enumeration(self, B, F, H, W):
        g = TokenGrid(B, F, H, W, 2)
        x = coded(g.stacked_shape)
        out, joined = capture_joined(x, g)
        for n, h, w, c in itertools.product(range(B * F), range(H), range(2 * W), range(2)):
            assert joined[n, h, w, c] == x.data[joined_source_index(g, n, h, w, c)]
        assert out.data.tobytes() == x.data.tobytes()

    def test_identity_attention_bitwise(self, rng):
        g = TokenGrid(2, 3, 4, 4, 8)
        x = Tensor(rng.standard_normal(g.stacked_shape).astype(np.float32))
        assert phi(x, g, lambda s: s).data.tobytes() == x.data.tobytes()

    def test_zero_attention(self, rng):
        g = TokenGrid(1, 2, 2, 2, 3)
        x = Tensor(rng.standard_normal(g.stacked_shape))
        assert not phi(x, g, lambda s: Tensor(np.zeros(s.shape))).data.any()

    def test_mean_attention_matches_per_frame_mean(self, rng):
        g = TokenGrid(2, 3, 2, 2, 3)
        x = rng.standard_normal(g.stacked_shape)
        mean_map = lambda s: Tensor(np.broadcast_to(s.data.mean(axis=1, keepdims=True), s.shape).copy())  # noqa: E731
        out = phi(Tensor(x), g, mean_map).data
        hw = g.H * g.W
        for b, f in itertools.product(range(g.B), range(g.F)):
            tokens = np.concatenate([x[b, f * hw:(f + 1) * hw], x[g.B + b, f * hw:(f + 1) * hw]])
            expected = tokens.mean(axis=0)
            for row in (b, g.B + b):
                np.testing.assert_allclose(out[row, f * hw:(f + 1) * hw], np.broadcast_to(expected, (hw, g.d)), atol=1e-12)

    def test_frame_isolation(self, rng):
        g = TokenGrid(2, 3, 2, 2, 4)
        p = MultiHeadAttentionParams(4, 2, rng).to(np.float64)
        attn = lambda s: mha(s, s, p)  # noqa: E731
        x = rng.standard_normal(g.stacked_shape)
        base = phi(Tensor(x), g, attn).data
        hw = g.H * g.W
        for row, f in itertools.product(range(2 * g.B), range(g.F)):
            bumped = x.copy()
            bumped[row, f * hw + 1] += 0.5
            diff = np.abs(phi(Tensor(bumped), g, attn).data - base).reshape(2 * g.B, g.F, hw, g.d).max(axis=(2, 3))
            b = row % g.B
            for r2, f2 in itertools.product(range(2 * g.B), range(g.F)):
                if f2 != f or r2 % g.B != b:
                    assert diff[r2, f2] == 0.0

    def test_source_changes_target_with_dense_attention(self, rng):
        g = TokenGrid(1, 2, 2, 2, 4)
        p = MultiHeadAttentionParams(4, 2, rng).to(np.float64)
        x = rng.standard_normal(g.stacked_shape)
        base = phi(Tensor(x), g, lambda s: mha(s, s, p)).data
        bumped = x.copy()
        bumped[0, 0] += 1.0  # source stream, frame 0
        out = phi(Tensor(bumped), g, lambda s: mha(s, s, p)).data
        assert np.abs(out[1, :4] - base[1, :4]).max() > 1e-6

    def test_attention_must_keep_shape(self):
        g = TokenGrid(1, 1, 2, 2, 2)
        with pytest.raises(ShapeMismatch):
            phi(coded(g.stacked_shape), g, lambda s: reshape(s, (1, 4, 4)))


@pytest.fixture
def rng():
    return np.random.default_rng(7)
