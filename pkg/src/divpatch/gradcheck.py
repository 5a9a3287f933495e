"""Finite-difference gradient suite for every op and every loss.

Model-level checks run a 2-layer ViT (dim 16, 4 patches, 3 classes) in
float64.  Where the contrastive term is involved the reference layer is
computed once and held fixed, because its gradient is deliberately stopped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor, finite_diff_check
from .losses import (
    LossWeights,
    combined_loss,
    contrastive_loss,
    cosine_loss,
    mixing_loss,
    patch_rows,
)
from .mixing import MixSpec, mix_batch
from .vit import ActivationStack, ModelConfig, forward, init_params, patchify

TOLERANCE = 1e-4
EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _rand(rng, *shape, positive=False) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.abs(x) + 0.5 if positive else x


def _weighted_sum(rng, shape) -> Callable[[Tensor], Tensor]:
    """Random projection so every output coordinate matters."""
    w = rng.standard_normal(shape)
    return lambda y: ag.sum_(y * w)


def op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def check(name, fn, x, out_shape):
        proj = _weighted_sum(rng, out_shape)
        results.append(CheckResult(name, finite_diff_check(lambda t: proj(fn(t)), x, EPS)))

    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    check("matmul.a", lambda t: ag.matmul(t, b), a, (2, 3, 5))
    check("matmul.b", lambda t: ag.matmul(a, t), b, (2, 3, 5))
    bb = _rand(rng, 2, 4, 5)
    check("matmul.batched", lambda t: ag.matmul(a, t), bb, (2, 3, 5))
    x = _rand(rng, 3, 6)
    g, beta = _rand(rng, 6), _rand(rng, 6)
    check("layer_norm.x", lambda t: ag.layer_norm(t, g, beta), x, (3, 6))
    check("layer_norm.gain", lambda t: ag.layer_norm(x, t, beta), g, (3, 6))
    check("layer_norm.bias", lambda t: ag.layer_norm(x, g, t), beta, (3, 6))
    check("softmax", lambda t: ag.softmax(t, axis=-1), x, (3, 6))
    check("softmax.axis0", lambda t: ag.softmax(t, axis=0), x, (3, 6))
    check("log_softmax", lambda t: ag.log_softmax(t, axis=-1), x, (3, 6))
    check("gelu", ag.gelu, x, (3, 6))
    y = _rand(rng, 3, 6)
    check("add", lambda t: t + y, x, (3, 6))
    check("add.broadcast", lambda t: y + t, _rand(rng, 6), (3, 6))
    check("sub", lambda t: y - t, x, (3, 6))
    check("mul", lambda t: t * y, x, (3, 6))
    check("mul.broadcast", lambda t: y * t, _rand(rng, 3, 1), (3, 6))
    check("div", lambda t: y / t, _rand(rng, 3, 6, positive=True), (3, 6))
    check("scale", lambda t: ag.scale(t, -2.5), x, (3, 6))
    check("exp", ag.exp, x, (3, 6))
    check("log", ag.log, _rand(rng, 3, 6, positive=True), (3, 6))
    check("sqrt", ag.sqrt, _rand(rng, 3, 6, positive=True), (3, 6))
    check("abs", ag.abs_, x, (3, 6))
    check("sum.axis", lambda t: ag.sum_(t, axis=1), x, (3,))
    check("mean.axis", lambda t: ag.mean(t, axis=0), x, (6,))
    check("mean.all", lambda t: ag.reshape(ag.mean(t), (1,)), x, (1,))
    check("concat", lambda t: ag.concat([t, y, t], axis=1), x, (3, 18))
    check("slice", lambda t: ag.slice_(t, 1, 4, axis=1), x, (3, 3))
    check("transpose", lambda t: ag.transpose(t, (1, 0)), x, (6, 3))
    check("reshape", lambda t: ag.reshape(t, (2, 9)), x, (2, 9))
    # shared subexpression: gradients from both paths must add up
    check("fan_out", lambda t: (t * t) + ag.exp(t) * t, x, (3, 6))
    return results


# ---------------------------------------------------------------------------
# losses through a toy model
# ---------------------------------------------------------------------------

TOY_CONFIG = ModelConfig(
    image_size=4, patch_size=2, channels=1, dim=16, depth=2, heads=2, num_classes=3
)


def toy_setup(seed: int = 0):
    """Float64 toy model, a two-example patch batch and a mixed version of it."""
    rng = np.random.default_rng(seed)
    params = init_params(TOY_CONFIG, seed).astype(np.float64)
    # break the zero-bias / unit-gain symmetry so every parameter matters
    for name, t in params.items():
        t.data = t.data + 0.05 * rng.standard_normal(t.shape)
    images = rng.standard_normal((2, 1, 4, 4))
    patches = patchify(images, TOY_CONFIG.patch_size)
    labels = np.array([0, 2])
    mixed = mix_batch(patches, labels, MixSpec(), rng, TOY_CONFIG.num_classes)
    return params, patches, labels, mixed


def _frozen_reference(params, patches, layer: int) -> Tensor:
    _, stack = forward(params, patches)
    return stack.layers[layer].detach()


def loss_functions(params, patches, mixed, weights: LossWeights, ref: Tensor | None = None):
    """Scalar functions of the patch batch for each loss (reference layer frozen)."""
    if ref is None:
        ref = _frozen_reference(params, patches, weights.contrastive_reference_layer)
    depth = params.config.depth

    def run(x):
        logits, stack = forward(params, x)
        layers = list(stack.layers)
        layers[weights.contrastive_reference_layer] = ref
        return logits, ActivationStack(layers, stack.final)

    def l_cos(x):
        return cosine_loss(patch_rows(run(x)[1].layers[depth]))

    def l_con(x):
        st = run(x)[1]
        return contrastive_loss(patch_rows(st.layers[1]), patch_rows(st.layers[depth]))

    def l_mix(x):
        st = run(x)[1]
        return mixing_loss(
            patch_rows(st.layers[depth]), mixed.y_patch,
            params["patch_head_w"], params["patch_head_b"],
            pooled=weights.pooled_mixing, mask=mixed.mask,
        )  # fmt: skip

    def total(x):
        logits, st = run(x)
        return combined_loss(logits, mixed.y_mix, st, mixed, weights, params).total

    return {"l_cos": l_cos, "l_contrastive": l_con, "l_mixing": l_mix, "combined": total}


def _param_function(params, patches, mixed, weights, name: str, which: str):
    """The loss ``which`` as a function of one parameter tensor."""

    ref = _frozen_reference(params, patches, weights.contrastive_reference_layer)

    def f(t):
        p = params.with_tensor(name, t)
        return loss_functions(p, patches, mixed, weights, ref)[which](patches)

    return f


def model_checks(seed: int = 0, max_coords: int = 6) -> list[CheckResult]:
    params, patches, _, mixed = toy_setup(seed)
    weights = LossWeights(1.0, 1.0, 1.0)
    results = []
    for name, fn in loss_functions(params, patches, mixed, weights).items():
        results.append(CheckResult(f"{name}.patches", finite_diff_check(fn, patches, EPS)))
    pooled = LossWeights(1.0, 1.0, 1.0, pooled_mixing=True)
    fn = loss_functions(params, patches, mixed, pooled)["l_mixing"]
    results.append(CheckResult("l_mixing_pooled.patches", finite_diff_check(fn, patches, EPS)))

    rng = np.random.default_rng(seed + 1)
    for name, t in params.items():
        if name.endswith(".bk"):
            # a key bias shifts every score of a query equally, so softmax
            # cancels it: the gradient is exactly zero and central differences
            # only see round-off
            results.append(_vanishing_gradient(params, patches, mixed, weights, name))
            continue
        size = t.data.size
        coords = rng.choice(size, size=min(max_coords, size), replace=False)
        f = _param_function(params, patches, mixed, weights, name, "combined")
        results.append(CheckResult(f"combined.{name}", finite_diff_check(f, t.data, EPS, coords)))
    return results


def _vanishing_gradient(params, patches, mixed, weights, name: str) -> CheckResult:
    f = _param_function(params, patches, mixed, weights, name, "combined")
    t = Tensor(params[name].data.copy(), requires_grad=True)
    ag.backward(f(t))
    size = 0.0 if t.grad is None else float(np.max(np.abs(t.grad)))
    return CheckResult(f"combined.{name} (zero)", size, tolerance=1e-10)


def stop_gradient_check(seed: int = 0) -> CheckResult:
    """Gradient reaching the reference layer through the contrastive loss (must be 0)."""
    rng = np.random.default_rng(seed)
    h1 = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    hl = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    ag.backward(contrastive_loss(h1, hl))
    leak = 0.0 if h1.grad is None else float(np.max(np.abs(h1.grad)))
    ok = hl.grad is not None and np.any(hl.grad != 0)
    return CheckResult("contrastive.stop_gradient", leak if ok else float("inf"), tolerance=1e-300)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return op_checks(seed) + model_checks(seed) + [stop_gradient_check(seed)]


def main() -> int:
    results = run_suite()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:40s} {r.error:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0
