"""Minimal pre-LN vision transformer on top of :mod:`divpatch.autograd`.

Block layout (DeiT style)::

    x = x + drop_path(attn(norm1(x)))
    x = x + drop_path(mlp(norm2(x)))

``forward`` records every token matrix between blocks in an
:class:`ActivationStack` so that the diversity losses and metrics can read
intermediate patch representations.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """Invalid model or data configuration."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    drop_path_max: float = 0.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.dim <= 0 or self.heads <= 0 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ConfigError("drop_path_max must lie in [0, 1)")
        if self.num_classes < 1 or self.channels < 1:
            raise ConfigError("num_classes and channels must be >= 1")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in types:
                raise ConfigError(f"unknown model config field {key!r}")
            kwargs[key] = int(value) if types[key] in ("int", int) else float(value)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``(C, H, W)`` (or ``(B, C, H, W)``) into raster-ordered flattened patches.

    Each patch is flattened in ``(C, p, p)`` order, giving rows of length
    ``C * p * p``.
    """
    image = np.asarray(image)
    batched = image.ndim == 4
    if not batched:
        if image.ndim != 3:
            raise ConfigError(f"expected a (C, H, W) image, got shape {image.shape}")
        image = image[None]
    b, c, h, w = image.shape
    if h != w:
        raise ConfigError(f"image must be square, got {h}x{w}")
    if h % patch_size:
        raise ConfigError(f"image side {h} not divisible by patch size {patch_size}")
    g = h // patch_size
    out = image.reshape(b, c, g, patch_size, g, patch_size)
    out = out.transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * patch_size * patch_size)
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    patches = np.asarray(patches)
    batched = patches.ndim == 3
    if not batched:
        patches = patches[None]
    b, n, _ = patches.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ConfigError(f"{n} patches do not form a square grid")
    out = patches.reshape(b, g, g, channels, patch_size, patch_size)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, g * patch_size, g * patch_size)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

_BLOCK_FIELDS = (
    "ln1_g", "ln1_b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b",
)  # fmt: skip


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Names and shapes of every parameter, in checkpoint order."""
    d, hd, c = config.dim, config.hidden_dim, config.num_classes
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["patch_w"] = (config.patch_dim, d)
    shapes["patch_b"] = (d,)
    shapes["cls_token"] = (1, 1, d)
    shapes["pos_embed"] = (1, config.num_patches + 1, d)
    for i in range(config.depth):
        block = {
            "ln1_g": (d,), "ln1_b": (d,),
            "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "fc1_w": (d, hd), "fc1_b": (hd,), "fc2_w": (hd, d), "fc2_b": (d,),
        }  # fmt: skip
        for name in _BLOCK_FIELDS:
            shapes[f"blocks.{i}.{name}"] = block[name]
    shapes["norm_g"] = (d,)
    shapes["norm_b"] = (d,)
    shapes["head_w"] = (d, c)
    shapes["head_b"] = (c,)
    shapes["patch_head_w"] = (d, c)
    shapes["patch_head_b"] = (c,)
    return shapes


class ViTParams:
    """Ordered collection of named parameter tensors plus the config they fit."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ConfigError("parameter names do not match the config")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def replace(self, **updates: Tensor) -> "ViTParams":
        """Shallow copy with some tensors swapped (names use ``__`` for ``.``)."""
        tensors = OrderedDict(self.tensors)
        for key, value in updates.items():
            tensors[key.replace("__", ".")] = value
        return ViTParams(self.config, tensors)

    def with_tensor(self, name: str, value: Tensor) -> "ViTParams":
        tensors = OrderedDict(self.tensors)
        tensors[name] = value
        return ViTParams(self.config, tensors)

    def astype(self, dtype) -> "ViTParams":
        return ViTParams(
            self.config,
            OrderedDict(
                (k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad))
                for k, v in self.tensors.items()
            ),
        )

    def copy(self) -> "ViTParams":
        return self.astype(next(iter(self.tensors.values())).dtype)

    def equal(self, other: "ViTParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(a.data, other[k].data) for k, a in self.tensors.items()
        )


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count."""
    d, hd, c, n = config.dim, config.hidden_dim, config.num_classes, config.num_patches
    embed = config.patch_dim * d + d + d + (n + 1) * d
    block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hd + hd) + (hd * d + d)
    heads = 2 * d + 2 * (d * c + c)
    return embed + config.depth * block + heads


def init_params(config: ModelConfig, seed: int) -> ViTParams:
    """Embeddings ~ truncated normal (std 0.02, cut at 2 std); weights uniform in
    ``+-1/sqrt(fan_in)``; biases zero; layer-norm gains one."""
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("cls_token", "pos_embed"):
            arr = truncnorm.rvs(-2.0, 2.0, scale=0.02, size=shape, random_state=rng)
        elif leaf.endswith("_g"):
            arr = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return ViTParams(config, tensors)


def drop_path_rates(config: ModelConfig) -> list[float]:
    """Per-block stochastic-depth rates rising linearly from 0 to ``drop_path_max``."""
    depth = config.depth
    if depth == 0:
        return []
    if depth == 1:
        return [0.0]
    return [config.drop_path_max * i / (depth - 1) for i in range(depth)]


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ActivationStack:
    """Token matrices ``(batch, n + 1, dim)`` entering block 1 (index 0) and
    leaving every block (index 1..L); token 0 is the class patch.  ``final``
    holds the last entry after the final layer norm."""

    layers: list[Tensor]
    final: Tensor

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, layer: int) -> Tensor:
        return self.layers[layer]

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    def example(self, index: int) -> list[np.ndarray]:
        """Per-layer ``(n + 1, dim)`` arrays for one batch element."""
        return [t.data[index] for t in self.layers]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.matmul(x, w) + b


def _drop_path(branch: Tensor, rate: float, train_mode: bool, rng) -> Tensor:
    if not train_mode or rate == 0.0:
        return branch
    keep = rng.random(branch.shape[0]) >= rate
    mask = (keep / (1.0 - rate)).astype(branch.dtype).reshape(-1, *([1] * (branch.ndim - 1)))
    return ag.mul(branch, mask)


def _attention(x: Tensor, p: ViTParams, prefix: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(z: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, p[prefix + "wq"], p[prefix + "bq"]))
    k = split(_linear(x, p[prefix + "wk"], p[prefix + "bk"]))
    v = split(_linear(x, p[prefix + "wv"], p[prefix + "bv"]))
    scores = ag.scale(ag.matmul(q, ag.swapaxes(k, -1, -2)), dh**-0.5)
    out = ag.matmul(ag.softmax(scores, axis=-1), v)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, t, d))
    return _linear(out, p[prefix + "wo"], p[prefix + "bo"])


def forward(
    params: ViTParams,
    patches,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ActivationStack]:
    """Class logits ``(batch, num_classes)`` and the per-layer activation stack.

    ``rng`` drives drop-path and is only consulted in train mode.
    """
    cfg = params.config
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ConfigError(f"expected a non-empty (batch, n, patch_dim) input, got {x.shape}")
    b, n, pdim = x.shape
    if n != cfg.num_patches or pdim != cfg.patch_dim:
        raise ConfigError(
            f"patches {x.shape[1:]} do not match config ({cfg.num_patches}, {cfg.patch_dim})"
        )
    rates = drop_path_rates(cfg)
    if train_mode and rng is None and any(rates):
        raise ValueError("train-mode forward with drop path needs an rng")

    tokens = _linear(x, params["patch_w"], params["patch_b"])
    cls = params["cls_token"] + np.zeros((b, 1, cfg.dim), dtype=tokens.dtype)
    h = ag.concat([cls, tokens], axis=1) + params["pos_embed"]
    layers = [h]
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        a = _attention(ag.layer_norm(h, params[pre + "ln1_g"], params[pre + "ln1_b"], cfg.ln_eps),
                       params, pre, cfg.heads)
        h = h + _drop_path(a, rates[i], train_mode, rng)
        m = ag.layer_norm(h, params[pre + "ln2_g"], params[pre + "ln2_b"], cfg.ln_eps)
        m = _linear(ag.gelu(_linear(m, params[pre + "fc1_w"], params[pre + "fc1_b"])),
                    params[pre + "fc2_w"], params[pre + "fc2_b"])
        h = h + _drop_path(m, rates[i], train_mode, rng)
        layers.append(h)

    final = ag.layer_norm(h, params["norm_g"], params["norm_b"], cfg.ln_eps)
    cls_out = ag.reshape(ag.slice_(final, 0, 1, axis=1), (b, cfg.dim))
    logits = _linear(cls_out, params["head_w"], params["head_b"])
    return logits, ActivationStack(layers, final)


def predict(params: ViTParams, patches) -> np.ndarray:
    """Eval-mode argmax class predictions."""
    logits, _ = forward(params, patches, train_mode=False)
    return np.argmax(logits.data, axis=-1)


# ---------------------------------------------------------------------------
# DPCK checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DPCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ViTParams, path) -> None:
    """Write ``DPCK`` | u32 version | config text + NUL | tensors in
    :func:`param_shapes` order, each as u32 rank, u32 dims, f32 LE data."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(params.config.to_text().encode("utf-8") + b"\0")
    for t in params.values():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ViTParams:
    raw = Path(path).read_bytes()
    pos = 0

    def take(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte offset {pos}")
        chunk = raw[pos : pos + size]
        pos += size
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte offset 0")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte offset 4")
    end = raw.find(b"\0", pos)
    if end < 0:
        raise CheckpointError(f"unterminated config block at byte offset {pos}")
    config = ModelConfig.from_text(take(end - pos).decode("utf-8"))
    take(1)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        offset = pos
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if tuple(dims) != shape:
            raise CheckpointError(f"{name}: shape {dims} != {shape} at byte offset {offset}")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True)
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes at byte offset {pos}")
    return ViTParams(config, tensors)
