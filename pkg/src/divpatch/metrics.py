"""Patch-wise absolute cosine similarity and per-layer diversity profiles.

Also reads and writes ``PDMP`` activation dumps::

    b"PDMP" | u32 version (=1) | u32 num_layers |
    per layer: u32 n_tokens | u32 dim | f32 LE row-major data

All integers are little-endian.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEGENERATE_NORM = 1e-12


class DegenerateRowError(ValueError):
    """A patch representation has (numerically) zero norm."""


class DumpFormatError(ValueError):
    """Malformed PDMP activation dump."""


def _patch_rows(h, has_class_patch: bool) -> np.ndarray:
    h = np.asarray(getattr(h, "data", h), dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"expected a (tokens, dim) matrix, got shape {h.shape}")
    rows = h[1:] if has_class_patch else h
    if rows.shape[0] < 2:
        raise ValueError("need at least two patches")
    return rows


def patch_cosine(h, has_class_patch: bool = True) -> float:
    """Mean |cos| over ordered pairs of distinct patch rows.

    The class patch (row 0) is dropped when ``has_class_patch``.
    """
    rows = _patch_rows(h, has_class_patch)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms < DEGENERATE_NORM):
        bad = int(np.argmin(norms))
        raise DegenerateRowError(f"patch row {bad} has norm {norms[bad]:.3g}")
    unit = rows / norms[:, None]
    gram = np.abs(unit @ unit.T)
    n = rows.shape[0]
    total = gram.sum() - np.trace(gram)
    return float(min(max(total / (n * (n - 1)), 0.0), 1.0))


def patch_cosine_batch(h, has_class_patch: bool = True) -> np.ndarray:
    """:func:`patch_cosine` for every element of a ``(batch, tokens, dim)`` array."""
    h = np.asarray(getattr(h, "data", h))
    return np.array([patch_cosine(x, has_class_patch) for x in h])


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerStat:
    layer: int
    mean_p: float
    std_p: float
    count: int


@dataclass
class DiversityProfile:
    layers: list[LayerStat]

    def __post_init__(self):
        idx = [s.layer for s in self.layers]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("profile layers must be strictly increasing")

    @property
    def means(self) -> np.ndarray:
        return np.array([s.mean_p for s in self.layers])

    def first(self) -> float:
        return self.layers[0].mean_p

    def last(self) -> float:
        return self.layers[-1].mean_p

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "mean_p", "std_p", "count"])
            for s in self.layers:
                w.writerow([s.layer, repr(s.mean_p), repr(s.std_p), s.count])

    @classmethod
    def from_csv(cls, path) -> "DiversityProfile":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [
                LayerStat(int(r["layer"]), float(r["mean_p"]), float(r["std_p"]), int(r["count"]))
                for r in rows
            ]
        )


def profile_from_values(values: np.ndarray) -> DiversityProfile:
    """Summarise a ``(examples, layers)`` array of P values."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("need at least one example")
    return DiversityProfile(
        [
            LayerStat(i, float(col.mean()), float(col.std()), int(col.size))
            for i, col in enumerate(values.T)
        ]
    )


def profile(params, patches, max_examples: int | None = None, batch_size: int = 64) -> DiversityProfile:
    """Eval-mode per-layer P statistics over ``patches`` (``(N, n, patch_dim)``).

    No augmentation is applied; pass clean patchified images.
    """
    from .vit import forward

    patches = np.asarray(getattr(patches, "data", patches))
    if max_examples is not None:
        patches = patches[:max_examples]
    if len(patches) == 0:
        raise ValueError("cannot profile an empty sample")
    values = []
    for start in range(0, len(patches), batch_size):
        _, stack = forward(params, patches[start : start + batch_size], train_mode=False)
        per_layer = [patch_cosine_batch(t.data) for t in stack.layers]
        values.append(np.stack(per_layer, axis=1))
    return profile_from_values(np.concatenate(values, axis=0))


# ---------------------------------------------------------------------------
# PDMP dumps
# ---------------------------------------------------------------------------

DUMP_MAGIC = b"PDMP"
DUMP_VERSION = 1


def write_dump(layers, path) -> None:
    """Write per-layer ``(n_tokens, dim)`` matrices; accepts arrays, tensors or
    a single-example :class:`~divpatch.vit.ActivationStack`."""
    if hasattr(layers, "layers"):
        if layers.layers[0].ndim != 2:
            raise ValueError("select one example with ActivationStack.example(i) first")
        layers = layers.layers
    mats = [np.ascontiguousarray(getattr(m, "data", m), dtype="<f4") for m in layers]
    parts = [DUMP_MAGIC, struct.pack("<II", DUMP_VERSION, len(mats))]
    for m in mats:
        if m.ndim != 2:
            raise ValueError(f"layer matrices must be 2-D, got {m.shape}")
        parts.append(struct.pack("<II", *m.shape))
        parts.append(m.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dump(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(raw):
            raise DumpFormatError(
                f"truncated dump: need {size} bytes at byte offset {pos}, file has {len(raw)}"
            )
        chunk = raw[pos : pos + size]
        pos += size
        return chunk

    if take(4) != DUMP_MAGIC:
        raise DumpFormatError("bad magic at byte offset 0")
    (version,) = struct.unpack("<I", take(4))
    if version != DUMP_VERSION:
        raise DumpFormatError(f"unsupported version {version} at byte offset 4")
    (num_layers,) = struct.unpack("<I", take(4))
    layers = []
    for _ in range(num_layers):
        n_tokens, dim = struct.unpack("<II", take(8))
        data = np.frombuffer(take(4 * n_tokens * dim), dtype="<f4")
        layers.append(data.reshape(n_tokens, dim).astype(np.float32))
    if pos != len(raw):
        raise DumpFormatError(f"trailing bytes at byte offset {pos}")
    return layers
