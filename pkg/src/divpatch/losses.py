"""Patch-diversification losses and the combined training objective.

All losses accept either a single example ``(n, dim)`` or a batch
``(batch, n, dim)`` of patch rows (class patch already removed) and average
over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .metrics import DEGENERATE_NORM, DegenerateRowError


@dataclass(frozen=True)
class LossWeights:
    alpha_cos: float = 0.0
    alpha_contrastive: float = 0.0
    alpha_mixing: float = 0.0
    pooled_mixing: bool = False
    # which recorded layers the losses read
    contrastive_reference_layer: int = 1
    mixing_loss_layer: int | None = None  # None -> last layer
    taps_final_norm: bool = False

    def __post_init__(self):
        for name in ("alpha_cos", "alpha_contrastive", "alpha_mixing"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def alphas(self) -> tuple[float, float, float]:
        return (self.alpha_cos, self.alpha_contrastive, self.alpha_mixing)


@dataclass
class LossReport:
    total: Tensor
    ce_class: float
    l_cos: float
    l_contrastive: float
    l_mixing: float

    def row(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "ce_class": self.ce_class,
            "l_cos": self.l_cos,
            "l_contrastive": self.l_contrastive,
            "l_mixing": self.l_mixing,
        }


def _batched(h) -> Tensor:
    h = ag.as_tensor(h)
    if h.ndim == 2:
        return ag.reshape(h, (1, *h.shape))
    if h.ndim != 3:
        raise ValueError(f"expected (n, dim) or (batch, n, dim) rows, got {h.shape}")
    return h


def patch_rows(tokens: Tensor) -> Tensor:
    """Drop the class patch (token 0) from ``(batch, n + 1, dim)`` tokens."""
    return ag.slice_(tokens, 1, tokens.shape[1], axis=1)


def cosine_loss(h_last) -> Tensor:
    """Differentiable patch-wise absolute cosine similarity of the given rows."""
    h = _batched(h_last)
    b, n, _ = h.shape
    if n < 2:
        raise ValueError("cosine loss needs at least two patches")
    norms = ag.sqrt(ag.sum_(h * h, axis=-1, keepdims=True))
    if np.any(norms.data < DEGENERATE_NORM):
        raise DegenerateRowError("zero-norm patch row in cosine loss")
    unit = h / norms
    gram = ag.abs_(ag.matmul(unit, ag.swapaxes(unit, -1, -2)))
    off_diag = (1.0 - np.eye(n)).astype(gram.dtype)
    per_example = ag.sum_(gram * off_diag, axis=(-2, -1))
    return ag.scale(ag.mean(per_example), 1.0 / (n * (n - 1)))


def contrastive_loss(h_first, h_last) -> Tensor:
    """Two-way log-softmax per patch: own early representation vs. the mean of
    the other late patches.  ``h_first`` is always treated as a constant."""
    h1 = _batched(h_first).detach()
    hl = _batched(h_last)
    if h1.shape != hl.shape:
        raise ValueError(f"shape mismatch: {h1.shape} vs {hl.shape}")
    n = hl.shape[1]
    if n < 2:
        raise ValueError("contrastive loss needs at least two patches")
    pos = ag.sum_(h1 * hl, axis=-1, keepdims=True)
    others = ag.scale(ag.sum_(hl, axis=1, keepdims=True) - hl, 1.0 / (n - 1))
    neg = ag.sum_(h1 * others, axis=-1, keepdims=True)
    logp = ag.log_softmax(ag.concat([pos, neg], axis=-1), axis=-1)
    return ag.neg(ag.mean(ag.slice_(logp, 0, 1, axis=-1)))


def _onehot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((*labels.shape, num_classes), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def soft_cross_entropy(logits, targets) -> Tensor:
    """``-sum(targets * log_softmax(logits))`` averaged over all leading axes."""
    logits = ag.as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    return ag.neg(ag.mean(ag.sum_(ag.log_softmax(logits, axis=-1) * targets, axis=-1)))


def mixing_loss(
    h_last,
    y_patch,
    head_w,
    head_b,
    pooled: bool = False,
    mask=None,
) -> Tensor:
    """Patch-level classification through a shared linear head.

    Per-patch mode averages cross entropy over every patch.  Pooled mode
    averages the rows of each provenance group (``mask`` true / false), sends
    each non-empty group through the head and sums the group losses.
    """
    h = _batched(h_last)
    y_patch = np.asarray(y_patch)
    if y_patch.size == 0:
        raise ValueError("empty patch labels")
    y_patch = y_patch.reshape(h.shape[0], -1)
    b, n, _ = h.shape
    if y_patch.shape[1] != n:
        raise ValueError(f"{y_patch.shape[1]} patch labels for {n} patches")
    num_classes = ag.as_tensor(head_w).shape[-1]
    if not pooled:
        logits = ag.matmul(h, head_w) + head_b
        return soft_cross_entropy(logits, _onehot(y_patch, num_classes, logits.dtype))

    mask = np.ones((b, n), dtype=bool) if mask is None else np.asarray(mask, bool).reshape(b, n)
    groups = np.stack([mask, ~mask], axis=1).astype(np.float64)  # (b, 2, n)
    counts = groups.sum(axis=-1)
    present = counts > 0
    weights = (groups / np.maximum(counts, 1)[..., None]).astype(h.dtype)
    pooled_rows = ag.matmul(weights, h)  # (b, 2, dim)
    logits = ag.matmul(pooled_rows, head_w) + head_b
    group_label = np.zeros((b, 2), dtype=np.int64)
    for i in range(b):
        for g in range(2):
            if present[i, g]:
                group_label[i, g] = y_patch[i][groups[i, g] > 0][0]
    targets = _onehot(group_label, num_classes, logits.dtype) * present[..., None]
    per_group = ag.neg(ag.sum_(ag.log_softmax(logits, axis=-1) * targets, axis=-1))
    return ag.mean(ag.sum_(per_group, axis=-1))


def combined_loss(logits, y_mix, stack, mixed, weights: LossWeights, params) -> LossReport:
    """Soft-label class-patch cross entropy plus the weighted diversity terms.

    ``mixed`` supplies per-patch labels and the provenance mask (an unmixed
    batch gives every patch its image's label).  Terms with zero weight are
    still reported but evaluated off the gradient graph.
    """
    depth = len(stack.layers) - 1
    ce = soft_cross_entropy(logits, y_mix)
    total = ce

    def last_rows(layer: int) -> Tensor:
        if layer == depth and weights.taps_final_norm:
            return patch_rows(stack.final)
        return patch_rows(stack.layers[layer])

    def term(alpha: float, fn, needed: list[int]):
        nonlocal total
        if any(not 0 <= layer <= depth for layer in needed):
            if alpha > 0:
                raise ValueError(f"activation stack of depth {depth} lacks layers {needed}")
            return float("nan")
        value = fn(alpha > 0)
        if alpha > 0:
            total = total + ag.scale(value, alpha)
        return float(value.data)

    def maybe_detach(t: Tensor, keep: bool) -> Tensor:
        return t if keep else t.detach()

    ref = weights.contrastive_reference_layer
    mix_layer = depth if weights.mixing_loss_layer is None else weights.mixing_loss_layer
    l_cos = term(
        weights.alpha_cos,
        lambda keep: cosine_loss(maybe_detach(last_rows(depth), keep)),
        [depth],
    )
    l_con = term(
        weights.alpha_contrastive,
        lambda keep: contrastive_loss(
            patch_rows(stack.layers[ref]), maybe_detach(last_rows(depth), keep)
        ),
        [ref, depth],
    )
    l_mix = term(
        weights.alpha_mixing,
        lambda keep: mixing_loss(
            maybe_detach(last_rows(mix_layer), keep),
            mixed.y_patch,
            maybe_detach(params["patch_head_w"], keep),
            maybe_detach(params["patch_head_b"], keep),
            pooled=weights.pooled_mixing,
            mask=mixed.mask,
        ),
        [mix_layer],
    )
    return LossReport(total, float(ce.data), l_cos, l_con, l_mix)
