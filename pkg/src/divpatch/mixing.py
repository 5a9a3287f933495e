"""Patch-granular mixing of image pairs.

A mixed example takes patch ``i`` from image 0 where ``mask[i]`` is true and
from image 1 otherwise; patches are copied, never blended.  Every patch keeps
the label of the image it came from, which is what the patch-wise mixing
loss trains against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

MODES = ("random", "block")


@dataclass(frozen=True)
class MixSpec:
    mode: str = "random"
    alpha: float = 1.0
    label_lambda: str = "realized"  # or "sampled"
    exclude_class: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mix mode must be one of {MODES}, got {self.mode!r}")
        if not self.alpha > 0:
            raise ValueError("Beta parameter alpha must be > 0")
        if self.label_lambda not in ("realized", "sampled"):
            raise ValueError("label_lambda must be 'realized' or 'sampled'")
        if not self.exclude_class:
            raise ValueError("the class patch is never mixed")


@dataclass
class MixedBatch:
    """Mixed patches with per-patch provenance.

    ``mask[b, i]`` is true when patch ``i`` of row ``b`` came from ``y0[b]``'s
    image.  ``y_patch`` holds the matching per-patch labels and ``y_mix`` the
    soft image label.
    """

    patches: np.ndarray  # (batch, n, patch_dim)
    mask: np.ndarray  # (batch, n) bool
    y0: np.ndarray
    y1: np.ndarray
    y_patch: np.ndarray  # (batch, n) int
    y_mix: np.ndarray  # (batch, num_classes)
    lambda_eff: np.ndarray  # (batch,)
    lambda_sampled: np.ndarray  # (batch,)

    def __len__(self) -> int:
        return len(self.patches)


def sample_lambda(spec: MixSpec, rng: np.random.Generator) -> float:
    return float(rng.beta(spec.alpha, spec.alpha))


def sample_mask_random(n: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Patch ``i`` comes from image 0 iff an independent uniform draw is below ``lam``."""
    if n < 1:
        raise ValueError("need at least one patch")
    return rng.random(n) < lam


def block_side(grid_side: int, lam: float) -> int:
    return int(min(max(round(grid_side * np.sqrt(1.0 - lam)), 0), grid_side))


def sample_mask_block(grid_side: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    """CutMix-style: a square of side ``round(grid_side * sqrt(1 - lam))`` patches,
    uniformly placed, is taken from image 1 (false); the rest is true."""
    side = block_side(grid_side, lam)
    grid = np.ones((grid_side, grid_side), dtype=bool)
    if side:
        top = int(rng.integers(0, grid_side - side + 1))
        left = int(rng.integers(0, grid_side - side + 1))
        grid[top : top + side, left : left + side] = False
    return grid.reshape(-1)


def sample_mask(spec: MixSpec, n: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    if spec.mode == "random":
        return sample_mask_random(n, lam, rng)
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError(f"block mixing needs a square patch grid, got {n} patches")
    return sample_mask_block(side, lam, rng)


def _onehot(y, num_classes: int) -> np.ndarray:
    out = np.zeros(num_classes, dtype=np.float32)
    out[y] = 1.0
    return out


def apply_mask(x0, y0, x1, y1, mask, num_classes: int, lam_sampled: float = None, label_lambda: str = "realized"):
    """Build one mixed example from an explicit mask; returns the fields of a MixedBatch row."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"patch grids differ: {x0.shape} vs {x1.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x0.shape[0],):
        raise ValueError(f"mask of shape {mask.shape} does not fit {x0.shape[0]} patches")
    patches = np.where(mask[:, None], x0, x1)
    lam_eff = float(mask.sum()) / mask.size
    lam_label = lam_eff if label_lambda == "realized" or lam_sampled is None else lam_sampled
    if y0 == y1:
        y_mix = _onehot(y0, num_classes)
    else:
        y_mix = lam_label * _onehot(y0, num_classes) + (1.0 - lam_label) * _onehot(y1, num_classes)
    y_patch = np.where(mask, y0, y1).astype(np.int64)
    return patches, y_patch, y_mix.astype(np.float32), lam_eff


def mix_pair(x0, y0, x1, y1, spec: MixSpec, rng: np.random.Generator, num_classes: int, lam: float | None = None) -> MixedBatch:
    """Mix two patchified examples into a single-row :class:`MixedBatch`."""
    x0, x1 = np.asarray(x0), np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"patch grids differ: {x0.shape} vs {x1.shape}")
    if lam is None:
        lam = sample_lambda(spec, rng)
    mask = sample_mask(spec, x0.shape[0], lam, rng)
    patches, y_patch, y_mix, lam_eff = apply_mask(
        x0, y0, x1, y1, mask, num_classes, lam, spec.label_lambda
    )
    return MixedBatch(
        patches=patches[None],
        mask=mask[None],
        y0=np.array([y0]),
        y1=np.array([y1]),
        y_patch=y_patch[None],
        y_mix=y_mix[None],
        lambda_eff=np.array([lam_eff]),
        lambda_sampled=np.array([lam]),
    )


def partner_index(batch_size: int) -> np.ndarray:
    """Row ``i`` is mixed with row ``(i + batch/2) mod batch``."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"mixing needs an even batch size >= 2, got {batch_size}")
    return (np.arange(batch_size) + batch_size // 2) % batch_size


def mix_batch(patches, labels, spec: MixSpec, rng: np.random.Generator, num_classes: int) -> MixedBatch:
    """Mix every row with its partner; one lambda and one mask per pair."""
    patches = np.asarray(patches)
    labels = np.asarray(labels)
    b, n, _ = patches.shape
    partner = partner_index(b)
    half = b // 2
    lams = np.array([sample_lambda(spec, rng) for _ in range(half)])
    masks = np.stack([sample_mask(spec, n, lam, rng) for lam in lams])

    rows = []
    for i in range(b):
        pair = i % half
        rows.append(
            apply_mask(
                patches[i], labels[i], patches[partner[i]], labels[partner[i]],
                masks[pair], num_classes, lams[pair], spec.label_lambda,
            )
        )  # fmt: skip
    pair_of = np.arange(b) % half
    return MixedBatch(
        patches=np.stack([r[0] for r in rows]),
        mask=masks[pair_of],
        y0=labels.copy(),
        y1=labels[partner],
        y_patch=np.stack([r[1] for r in rows]),
        y_mix=np.stack([r[2] for r in rows]),
        lambda_eff=np.array([r[3] for r in rows]),
        lambda_sampled=lams[pair_of],
    )


def unmixed_batch(patches, labels, num_classes: int) -> MixedBatch:
    """Identity mixing: every patch from image 0, one-hot labels."""
    patches = np.asarray(patches)
    labels = np.asarray(labels)
    b, n, _ = patches.shape
    y_mix = np.zeros((b, num_classes), dtype=np.float32)
    y_mix[np.arange(b), labels] = 1.0
    return MixedBatch(
        patches=patches,
        mask=np.ones((b, n), dtype=bool),
        y0=labels.copy(),
        y1=labels.copy(),
        y_patch=np.repeat(labels[:, None], n, axis=1).astype(np.int64),
        y_mix=y_mix,
        lambda_eff=np.ones(b),
        lambda_sampled=np.ones(b),
    )


def write_preview_csv(batch: MixedBatch, mode: str, path) -> None:
    """Columns: example, lambda_sampled, lambda_eff, mode, mask (0/1 string)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example", "lambda_sampled", "lambda_eff", "mode", "mask"])
        for i in range(len(batch)):
            w.writerow(
                [
                    i,
                    f"{batch.lambda_sampled[i]:.6f}",
                    f"{batch.lambda_eff[i]:.6f}",
                    mode,
                    "".join("1" if m else "0" for m in batch.mask[i]),
                ]
            )
