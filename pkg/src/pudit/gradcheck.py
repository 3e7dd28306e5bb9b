"""Finite-difference gradient suite.

Every check runs in float64: the loss is ``sum(w * f(inputs))`` with a
fixed random ``w`` so each output element carries a distinct weight, and
the analytic gradient of every input is compared against central
differences. Large inputs are probed on a random subset of positions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng as rngs
from .attention import GateProjParams, MultiHeadAttentionParams, ZeroLinearParams, gate_project, mha, zero_linear
from .backbone import Backbone, DiTConfig
from .flow import fm_loss, interpolate
from .predict_update import AblationMode, EditModel, PUModule, pu_forward
from .spatial import TokenGrid, phi
from .tensor import (Tensor, backward, concat, embedding, finite_diff_grad, gelu, layer_norm, matmul, mse, mul,
                     narrow, permute, rel_error, reshape, scale, sigmoid, softmax_lastaxis, split, sub, sum_all)

PER_OP_TOL = 1e-4
END_TO_END_TOL = 1e-3
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float
    probes: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tol)


def _weighted_sum(out, w: np.ndarray) -> Tensor:
    if isinstance(out, (list, tuple)):
        total = None
        for o, wi in zip(out, w):
            term = sum_all(mul(o, Tensor(wi)))
            total = term if total is None else total + term
        return total
    return sum_all(mul(out, Tensor(w)))


def check_function(name: str, f: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator,
                   tol: float = PER_OP_TOL, max_probes: int = 48, h: float = STEP,
                   loss: Callable[..., Tensor] | None = None) -> CheckResult:
    """Compare backward() against central differences for every tensor in ``inputs``.

    ``loss`` defaults to a random weighted sum of ``f``'s output(s).
    """
    start = time.perf_counter()
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    if loss is None:
        with_out = f(*inputs)
        w = ([rng.standard_normal(o.shape) for o in with_out] if isinstance(with_out, (list, tuple))
             else rng.standard_normal(with_out.shape))
        loss = lambda *xs: _weighted_sum(f(*xs), w)  # noqa: E731
    backward(loss(*inputs))
    worst, probes = 0.0, 0
    for x in inputs:
        analytic = np.zeros(x.shape) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
        idx = np.arange(x.size) if x.size <= max_probes else np.sort(rng.choice(x.size, max_probes, replace=False))
        numeric = finite_diff_grad(lambda _x: loss(*inputs), x, h, indices=idx)
        worst = max(worst, rel_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]))
        probes += len(idx)
    return CheckResult(name, worst, tol, probes, time.perf_counter() - start)


def _t(rng: np.random.Generator, *shape, low=None) -> Tensor:
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, dtype=np.float64)


def _perturb(module, rng: np.random.Generator, std: float = 0.3) -> None:
    """Move every parameter off its initial value so zero-initialized paths carry gradient."""
    for _, p in module.named_parameters():
        p.data = p.data + std * rng.standard_normal(p.shape)


def tiny_config() -> DiTConfig:
    return DiTConfig(image_size=4, channels=3, patch=2, frames_max=2, d=8, heads=2, blocks=1, vocab=24,
                     prompt_len=3, mlp_ratio=2)


def per_op_checks(seed: int) -> list[tuple[str, Callable[[np.random.Generator], CheckResult]]]:
    def c_add(r):
        return check_function("add (broadcast)", lambda a, b: a + b, [_t(r, 3, 4), _t(r, 4)], r)

    def c_sub(r):
        return check_function("sub", sub, [_t(r, 3, 4), _t(r, 3, 4)], r)

    def c_mul(r):
        return check_function("mul (broadcast)", mul, [_t(r, 2, 3, 4), _t(r, 1, 4)], r)

    def c_scale(r):
        return check_function("scale", lambda a: scale(a, -1.7), [_t(r, 5)], r)

    def c_sigmoid(r):
        return check_function("sigmoid", sigmoid, [Tensor(4 * r.standard_normal(16), dtype=np.float64)], r)

    def c_gelu(r):
        return check_function("gelu", gelu, [Tensor(2 * r.standard_normal(16), dtype=np.float64)], r)

    def c_matmul(r):
        return check_function("matmul", matmul, [_t(r, 3, 4), _t(r, 4, 2)], r)

    def c_bmm(r):
        return check_function("matmul (batched, shared rhs)", matmul, [_t(r, 2, 3, 4), _t(r, 4, 5)], r)

    def c_softmax(r):
        return check_function("softmax_lastaxis", softmax_lastaxis, [_t(r, 2, 5)], r)

    def c_layer_norm(r):
        return check_function("layer_norm", layer_norm, [_t(r, 4, 8), _t(r, 8), _t(r, 8)], r)

    def c_mse(r):
        target = r.standard_normal((3, 4))
        mask = (r.random((3, 4)) < 0.5).astype(np.float64)
        mask[0, 0] = 1.0
        return check_function("mse (masked)", lambda p: mse(p, Tensor(target), mask), [_t(r, 3, 4)], r,
                              loss=lambda p: mse(p, Tensor(target), mask))

    def c_reshape(r):
        return check_function("reshape", lambda a: reshape(a, (4, 6)), [_t(r, 2, 3, 4)], r)

    def c_permute(r):
        return check_function("permute", lambda a: permute(a, (2, 0, 1)), [_t(r, 2, 3, 4)], r)

    def c_concat(r):
        return check_function("concat", lambda a, b: concat([a, b], axis=1), [_t(r, 2, 3), _t(r, 2, 2)], r)

    def c_split(r):
        return check_function("split", lambda a: split(a, [1, 3], axis=1), [_t(r, 2, 4)], r)

    def c_narrow(r):
        return check_function("narrow", lambda a: narrow(a, 0, 1, 2), [_t(r, 4, 3)], r)

    def c_embedding(r):
        ids = np.array([[0, 2, 2], [4, 1, 0]])
        return check_function("embedding", lambda tab: embedding(tab, ids), [_t(r, 5, 3)], r)

    def c_composite(r):
        target = r.standard_normal((3, 5))

        def comp(a, b, gain, bias):
            return layer_norm(softmax_lastaxis(matmul(a, b)), gain, bias)

        return check_function("matmul>softmax>layer_norm>mse", comp, [_t(r, 3, 4), _t(r, 4, 5), _t(r, 5), _t(r, 5)], r,
                              loss=lambda *xs: mse(comp(*xs), Tensor(target)))

    def c_mha(r):
        p = MultiHeadAttentionParams(6, 2, r).to(np.float64)
        return check_function("multi-head attention", lambda q, kv, wq, wk, wv, wo: mha(q, kv, p),
                              [_t(r, 2, 3, 6), _t(r, 2, 4, 6), p.wq, p.wk, p.wv, p.wo], r)

    def c_zero_linear(r):
        p = ZeroLinearParams(4).to(np.float64)
        _perturb(p, r)
        return check_function("zero_linear", lambda x, w, b: zero_linear(x, p), [_t(r, 2, 3, 4), p.weight, p.bias], r)

    def c_gate(r):
        p = GateProjParams(4, 4, r).to(np.float64)
        return check_function("gate projection", lambda x, *_: gate_project(x, p),
                              [_t(r, 2, 3, 4), p.w1, p.b1, p.w2, p.b2], r)

    def c_phi(r):
        g = TokenGrid(B=1, F=2, H=2, W=2, d=4)
        p = MultiHeadAttentionParams(4, 2, r).to(np.float64)
        return check_function("phi (2D interaction)", lambda x, *_: phi(x, g, lambda s: mha(s, s, p)),
                              [_t(r, 2, g.seq_len, 4), p.wq, p.wk, p.wv, p.wo], r)

    def pu(mode):
        def c(r):
            g = TokenGrid(B=1, F=2, H=2, W=2, d=4)
            p = PUModule(4, 2, 2, 2, mode, rng=r).to(np.float64)
            _perturb(p, r)
            ctx = Tensor(r.standard_normal((2, 3, 4)), dtype=np.float64)
            params = [t for _, t in p.named_parameters()]
            return check_function(f"predict-update ({mode.value})",
                                  lambda x, h3d, *_: pu_forward(x, h3d, g, ctx, mode, p),
                                  [_t(r, 2, g.seq_len, 4), _t(r, 2, g.seq_len, 4), *params], r, max_probes=12)
        return c

    checks = [c_add, c_sub, c_mul, c_scale, c_sigmoid, c_gelu, c_matmul, c_bmm, c_softmax, c_layer_norm, c_mse,
              c_reshape, c_permute, c_concat, c_split, c_narrow, c_embedding, c_composite, c_mha, c_zero_linear,
              c_gate, c_phi] + [pu(m) for m in AblationMode]
    return [(fn.__name__, fn) for fn in checks]


def end_to_end_check(seed: int, mode=AblationMode.FULL, max_probes: int = 6) -> CheckResult:
    """FM loss of the edit model (stacked streams, masked target loss) on a tiny config."""
    r = rngs.generator(seed, rngs.GRADCHECK, 1000)
    bb = Backbone(tiny_config(), seed=seed)
    model = EditModel(bb, mode, seed=seed).to(np.float64)
    _perturb(model, r, std=0.1)
    cfg = bb.cfg
    b, f = 1, 2
    shape = (b, f, cfg.channels, cfg.image_size, cfg.image_size)
    src = r.standard_normal(shape)
    sample = interpolate(r.standard_normal(shape), r.standard_normal(shape), r.random(b))
    ids = (r.integers(1, cfg.vocab, (b, cfg.prompt_len)), r.integers(1, cfg.vocab, (b, cfg.prompt_len)))
    params = [p for _, p in model.named_parameters()]
    loss = lambda *_: fm_loss(model, sample, ids, source=src)  # noqa: E731
    res = check_function("end-to-end FM loss (tiny edit model)", None, params, r, tol=END_TO_END_TOL,
                         max_probes=max_probes, loss=loss)
    return res


def run_suite(seed: int = 0, end_to_end: bool = True) -> list[CheckResult]:
    results = []
    for i, (_, fn) in enumerate(per_op_checks(seed)):
        results.append(fn(rngs.generator(seed, rngs.GRADCHECK, i)))
    if end_to_end:
        results.append(end_to_end_check(seed))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'rel-err':>10}  {'tol':>7}  {'probes':>6}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.rel_error:10.3e}  {r.tol:7.0e}  {r.probes:6d}  {'PASS' if r.passed else 'FAIL'}")
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
