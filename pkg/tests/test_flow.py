import numpy as np
import pytest

from pudit.backbone import Backbone, DiTConfig
from pudit.errors import DomainError, EmptyMask, NonFiniteState, ShapeMismatch
from pudit.flow import (SamplerConfig, edit_sample, euler_sample, fm_loss, interpolate, source_target_mask,
                        to_image_space, to_model_space)
from pudit.predict_update import EditModel
from pudit.tensor import Tensor, add, backward, mse


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def const_field(c):
    return lambda x, t, _p: np.broadcast_to(c, x.shape).astype(x.dtype)


class TestInterpolate:
    def test_endpoints_exact(self, rng):
        x0 = rng.standard_normal((2, 3)).astype(np.float32)
        x1 = rng.standard_normal((2, 3)).astype(np.float32)
        assert interpolate(x0, x1, 0.0).xt.tobytes() == x0.tobytes()
        assert interpolate(x0, x1, 1.0).xt.tobytes() == x1.tobytes()

    def test_midpoint_integer_average(self):
        x0 = np.array([[0, 2, -4], [6, 1, 3]], dtype=np.float32)
        x1 = np.array([[2, 4, 0], [-6, 5, 3]], dtype=np.float32)
        xt = interpolate(x0, x1, 0.5).xt
        for i in range(2):
            for j in range(3):
                assert xt[i, j] == (x0[i, j] + x1[i, j]) / 2

    def test_per_sample_t(self, rng):
        x0, x1 = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        s = interpolate(x0, x1, np.array([0.0, 1.0]))
        np.testing.assert_array_equal(s.xt[0], x0[0])
        np.testing.assert_array_equal(s.xt[1], x1[1])

    def test_velocity_independent_of_t(self, rng):
        x0, x1 = rng.standard_normal(5), rng.standard_normal(5)
        assert interpolate(x0, x1, 0.1).u.tobytes() == interpolate(x0, x1, 0.9).u.tobytes()

    @pytest.mark.parametrize("t", [-0.01, 1.01, np.nan])
    def test_domain(self, t):
        with pytest.raises(DomainError):
            interpolate(np.zeros(2), np.ones(2), t)

    def test_shape(self):
        with pytest.raises(ShapeMismatch):
            interpolate(np.zeros(2), np.zeros(3), 0.5)


class TestFMLoss:
    def test_oracle_model_zero(self, rng):
        s = interpolate(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.random(3))
        loss = fm_loss(lambda x, t, p: Tensor(s.u), s, None)
        assert loss.data == 0.0

    def test_offset_one(self, rng):
        s = interpolate(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.random(3))
        loss = fm_loss(lambda x, t, p: Tensor(s.u + 1.0), s, None)
        assert loss.data == pytest.approx(1.0, abs=1e-12)

    def test_masked_matches_hand_sum(self, rng):
        shape = (1, 1, 3, 2, 2)
        s = interpolate(rng.standard_normal(shape), rng.standard_normal(shape), 0.3)
        src = rng.standard_normal(shape)
        pred = rng.standard_normal((2,) + shape[1:])
        seen = {}

        def model(x, t, src_ids, edit_ids):
            seen["t"] = t
            seen["x"] = x.data
            return Tensor(pred)

        loss = fm_loss(model, s, (None, None), source=src).data.item()
        # target stream is row 1; the source row never contributes
        total, count = 0.0, 0
        for idx in np.ndindex(*shape[1:]):
            total += (pred[(1,) + idx] - s.u[(0,) + idx]) ** 2
            count += 1
        assert loss == pytest.approx(total / count, rel=1e-12)
        assert seen["t"].tolist() == [1.0, 0.3]
        assert seen["x"][0].tobytes() == src[0].tobytes()

    def test_source_prediction_ignored(self, rng):
        shape = (2, 1, 3, 2, 2)
        s = interpolate(rng.standard_normal(shape), rng.standard_normal(shape), rng.random(2))
        base = np.concatenate([np.zeros_like(s.u), s.u])
        junk = base.copy()
        junk[:2] = 1e3
        f = lambda v: lambda *a: Tensor(v)  # noqa: E731
        assert fm_loss(f(base), s, (None, None), source=s.x1).data == 0.0
        assert fm_loss(f(junk), s, (None, None), source=s.x1).data == 0.0

    def test_nonnegative(self, rng):
        for _ in range(5):
            s = interpolate(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), rng.random(2))
            assert fm_loss(lambda *a: Tensor(rng.standard_normal((2, 3))), s, None).data >= 0

    def test_gradient_flows(self, rng):
        w = Tensor(np.zeros((2, 3)), requires_grad=True)
        s = interpolate(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), 0.5)
        backward(fm_loss(lambda x, t, p: add(x, w), s, None))
        np.testing.assert_allclose(w.grad, 2 * (s.xt - s.u) / 6, atol=1e-12)

    def test_mask_layout(self):
        m = source_target_mask(2, (3,))
        assert m.tolist() == [[0, 0, 0], [0, 0, 0], [1, 1, 1], [1, 1, 1]]

    def test_empty_mask(self):
        with pytest.raises(EmptyMask):
            mse(Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3))


class TestEuler:
    @pytest.mark.parametrize("steps", [1, 2, 8, 64])
    def test_constant_field_exact(self, steps, rng):
        # dyadic values keep every partial sum representable
        x0 = rng.integers(-8, 8, (3, 4)).astype(np.float32) / 4
        c = np.float32(0.75)
        out = euler_sample(const_field(c), x0, None, SamplerConfig(steps))
        assert out.tobytes() == (x0 + c).tobytes()

    @pytest.mark.parametrize("steps", [3, 7, 10])
    def test_constant_field_any_step_count(self, steps, rng):
        x0 = rng.standard_normal((2, 3))
        c = rng.standard_normal((2, 3))
        np.testing.assert_allclose(euler_sample(const_field(c), x0, None, SamplerConfig(steps)), x0 + c, atol=1e-14)

    def test_zero_field(self, rng):
        x0 = rng.standard_normal((2, 3)).astype(np.float32)
        assert euler_sample(const_field(0.0), x0, None, SamplerConfig(5)).tobytes() == x0.tobytes()

    def test_linear_path_step_halving_invariant(self, rng):
        x0 = rng.integers(-4, 4, 6).astype(np.float64)
        a = rng.integers(-4, 4, 6).astype(np.float64) / 2
        r16 = euler_sample(const_field(a), x0, None, SamplerConfig(16))
        r32 = euler_sample(const_field(a), x0, None, SamplerConfig(32))
        assert r16.tobytes() == r32.tobytes() == (x0 + a).tobytes()

    def test_grid_left_endpoints(self):
        seen = []
        euler_sample(lambda x, t, p: (seen.append(t[0]), np.zeros_like(x))[1], np.zeros(1), None, SamplerConfig(4))
        assert seen == [0.0, 0.25, 0.5, 0.75]

    @staticmethod
    def convergence_factors(field, x0, exact, steps=(16, 32, 64, 128)):
        errs = [np.abs(euler_sample(field, x0, None, SamplerConfig(n)) - exact).max() for n in steps]
        return [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]

    def test_first_order_on_quadratic_in_t(self):
        # v = 2ta integrates to a; left-endpoint Euler gives a(1 - 1/n)
        a = np.array([1.0, -0.5, 2.0])
        field = lambda x, t, p: 2 * t[:, None] * a  # noqa: E731
        x0 = np.zeros((1, 3))
        for n in (4, 16):
            np.testing.assert_allclose(euler_sample(field, x0, None, SamplerConfig(n))[0], a * (1 - 1 / n), atol=1e-14)
        for f in self.convergence_factors(field, x0, x0 + a):
            assert 1.5 <= f <= 2.5

    def test_first_order_on_quadratic_in_x(self):
        # dx/dt = x^2 has solution x0 / (1 - x0 t)
        x0 = np.array([[0.1, 0.3, -0.4, 0.45]])
        field = lambda x, t, p: x * x  # noqa: E731
        for f in self.convergence_factors(field, x0, x0 / (1 - x0)):
            assert 1.5 <= f <= 2.5

    def test_non_finite(self):
        with pytest.raises(NonFiniteState):
            euler_sample(const_field(np.inf), np.zeros(2), None, SamplerConfig(2))

    def test_steps_validated(self):
        with pytest.raises(ValueError):
            SamplerConfig(0)


@pytest.fixture(scope="module")
def backbone():
    return Backbone(DiTConfig(image_size=8, d=16, heads=2, blocks=2, frames_max=2, mlp_ratio=2), seed=4)


class TestEditSample:
    def test_deterministic(self, backbone):
        model = EditModel(backbone, seed=0)
        src = to_model_space(np.random.default_rng(0).random((2, 1, 3, 8, 8)))
        ids = np.ones((2, 8), dtype=np.int64)
        cfg = SamplerConfig(4)
        a = edit_sample(model, src, ids, ids, cfg, rng=np.random.default_rng(9))
        b = edit_sample(model, src, ids, ids, cfg, rng=np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_identity_at_init_matches_backbone_sampling(self, backbone):
        model = EditModel(backbone, seed=0)
        r = np.random.default_rng(1)
        src = to_model_space(r.random((2, 1, 3, 8, 8)))
        src_ids = r.integers(1, 20, (2, 8))
        edit_ids = r.integers(1, 20, (2, 8))
        noise = r.standard_normal(src.shape).astype(np.float32)
        cfg = SamplerConfig(6)
        edited = edit_sample(model, src, src_ids, edit_ids, cfg, noise=noise)
        plain = euler_sample(lambda x, t, p: backbone(Tensor(x), t, p), noise, edit_ids, cfg)
        np.testing.assert_allclose(edited, plain, atol=1e-5)

    def test_needs_noise_or_rng(self, backbone):
        with pytest.raises(ValueError):
            edit_sample(EditModel(backbone), np.zeros((1, 1, 3, 8, 8)), [[1] * 8], [[1] * 8])


def test_space_round_trip():
    img = np.linspace(0, 1, 11, dtype=np.float32)
    np.testing.assert_allclose(to_image_space(to_model_space(img)), img, atol=1e-7)
    assert to_model_space(np.array([0.0, 1.0])).tolist() == [-1.0, 1.0]
