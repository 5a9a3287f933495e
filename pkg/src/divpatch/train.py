"""Training, evaluation and ablation of the diversified vision transformer."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import DatasetSpec, Dataset, batches, load_splits
from .losses import LossWeights, combined_loss, soft_cross_entropy
from .metrics import DiversityProfile, profile
from .mixing import MixSpec, mix_batch, unmixed_batch
from .vit import ModelConfig, ViTParams, forward, init_params, predict, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "epoch", "lr", "total", "ce_class", "l_cos", "l_contrastive", "l_mixing"]
LOSS_KEYS = ("alpha_cos", "alpha_contrastive", "alpha_mixing", "pooled_mixing")


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    # model
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
    # data
    source: str = "synthetic"
    frequency: float = 0.25
    amplitude: float = 0.25
    tint: float = 0.1
    noise_std: float = 0.1
    train_size: int = 2048
    eval_size: int = 512
    train_images: str = ""
    train_labels: str = ""
    eval_images: str = ""
    eval_labels: str = ""
    # losses
    alpha_cos: float = 0.0
    alpha_contrastive: float = 0.0
    alpha_mixing: float = 0.0
    pooled_mixing: bool = False
    contrastive_reference_layer: int = 1
    mixing_loss_layer: int = -1  # -1: last layer
    loss_taps_final_norm: bool = False
    # patch mixing (always on while alpha_mixing > 0)
    mix_enabled: bool = False
    mix_mode: str = "random"
    mix_alpha: float = 1.0
    label_lambda: str = "realized"
    # optimisation
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = -1  # -1: 5% of all steps
    total_epochs: int = 10
    batch_size: int = 64
    # bookkeeping
    seed: int = 0
    output_dir: str = ""
    profile_examples: int = 128

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
            dim=self.dim, depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes, drop_path_max=self.drop_path_max, ln_eps=self.ln_eps,
        )  # fmt: skip

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            source=self.source, image_size=self.image_size, channels=self.channels,
            num_classes=self.num_classes, frequency=self.frequency, amplitude=self.amplitude,
            tint=self.tint, noise_std=self.noise_std, train_size=self.train_size,
            eval_size=self.eval_size, train_images=self.train_images,
            train_labels=self.train_labels, eval_images=self.eval_images,
            eval_labels=self.eval_labels,
        )  # fmt: skip

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha_cos=self.alpha_cos,
            alpha_contrastive=self.alpha_contrastive,
            alpha_mixing=self.alpha_mixing,
            pooled_mixing=self.pooled_mixing,
            contrastive_reference_layer=self.contrastive_reference_layer,
            mixing_loss_layer=None if self.mixing_loss_layer < 0 else self.mixing_loss_layer,
            taps_final_norm=self.loss_taps_final_norm,
        )

    def mix_spec(self) -> MixSpec:
        return MixSpec(mode=self.mix_mode, alpha=self.mix_alpha, label_lambda=self.label_lambda)

    @property
    def mixing_on(self) -> bool:
        return self.mix_enabled or self.alpha_mixing > 0

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.as_dict().items())

    def hash(self) -> str:
        """Digest of everything except ``output_dir``."""
        body = "".join(
            f"{k} = {_format(v)}\n" for k, v in self.as_dict().items() if k != "output_dir"
        )
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind, raw: str, key: str):
    raw = raw.strip()
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: cannot parse {raw!r} as a boolean")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_assignments(lines, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _parse(kinds[key], raw, key)
    return values


def load_config(path=None, overrides=(), env=None) -> TrainConfig:
    """Defaults < config file < ``--set`` overrides < ``DIVPATCH_SEED``."""
    values = {}
    if path:
        values.update(parse_assignments(Path(path).read_text().splitlines(), str(path)))
    values.update(parse_assignments(overrides, "--set"))
    env = os.environ if env is None else env
    if env.get("DIVPATCH_SEED"):
        values["seed"] = int(env["DIVPATCH_SEED"])
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str, shape: tuple[int, ...]) -> bool:
    """Weight decay applies to weight matrices only (not biases, norms, embeddings)."""
    return len(shape) == 2


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamWState:
    """In-place AdamW update with bias-corrected moments and decoupled decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name} at optimiser step {state.step}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and decays(name, p.shape):
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_top1: float
    profile: DiversityProfile


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    params: ViTParams | None = None

    @property
    def totals(self) -> list[float]:
        return [row["total"] for row in self.steps]

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for row in self.steps:
                w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_COLUMNS})

    def write_epochs(self, path) -> None:
        depth = len(self.epochs[0].profile.layers) if self.epochs else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "eval_top1"] + [f"p_layer{i}" for i in range(depth)])
            for rec in self.epochs:
                w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.eval_top1)]
                           + [repr(s.mean_p) for s in rec.profile.layers])


def step_rngs(seed: int, epoch: int, step: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for patch mixing and drop path at one step."""
    return np.random.default_rng([seed, epoch, step, 1]), np.random.default_rng([seed, epoch, step, 2])


def evaluate(params: ViTParams, dataset: Dataset, patch_size: int, batch_size: int = 128) -> float:
    """Top-1 accuracy from class logits alone; no mixing, no auxiliary losses."""
    patches = dataset.patches(patch_size)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        pred = predict(params, patches[start : start + batch_size])
        correct += int(np.sum(pred == dataset.labels[start : start + batch_size]))
    return correct / len(dataset)


def _warmup(config: TrainConfig, total_steps: int) -> int:
    if config.warmup_steps >= 0:
        return config.warmup_steps
    return max(int(round(0.05 * total_steps)), 0)


def _dump_batch(config: TrainConfig, step: int, patches, labels) -> str | None:
    if not config.output_dir:
        return None
    path = Path(config.output_dir) / f"diverged_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, patches=patches, labels=labels)
    return str(path)


def train(config: TrainConfig, data: tuple[Dataset, Dataset] | None = None, max_steps: int | None = None) -> RunLog:
    """Run the configured training; returns the per-step and per-epoch log.

    Files written when ``config.output_dir`` is set: ``config.txt``,
    ``metrics.csv``, ``epochs.csv``, ``last.dpck`` and ``best.dpck``.
    """
    model_cfg = config.model_config()
    weights = config.loss_weights()
    spec = config.mix_spec()
    train_set, eval_set = data if data is not None else load_splits(config.dataset_spec(), config.seed)
    steps_per_epoch = len(train_set) // config.batch_size
    total_steps = steps_per_epoch * config.total_epochs
    warmup = _warmup(config, total_steps)

    out = Path(config.output_dir) if config.output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text())

    params = init_params(model_cfg, config.seed)
    state = AdamWState()
    runlog = RunLog(params=params)
    eval_patches = eval_set.patches(config.patch_size)[: config.profile_examples]
    best = -1.0
    step = 0
    for epoch in range(config.total_epochs):
        epoch_losses = []
        for batch in batches(train_set, config.batch_size, config.seed, epoch, config.patch_size):
            if max_steps is not None and step >= max_steps:
                break
            mix_rng, drop_rng = step_rngs(config.seed, epoch, step)
            if config.mixing_on:
                mixed = mix_batch(batch.patches, batch.labels, spec, mix_rng, config.num_classes)
            else:
                mixed = unmixed_batch(batch.patches, batch.labels, config.num_classes)
            params.zero_grad()
            logits, stack = forward(params, mixed.patches, train_mode=True, rng=drop_rng)
            report = combined_loss(logits, mixed.y_mix, stack, mixed, weights, params)
            if not np.isfinite(report.total.data):
                where = _dump_batch(config, step, mixed.patches, batch.labels)
                raise TrainingDiverged(f"non-finite loss at step {step} (batch dumped to {where})")
            ag.backward(report.total)
            lr = lr_schedule(step + 1, warmup, total_steps, config.lr)
            adamw_step(
                {k: t.data for k, t in params.items()},
                {k: t.grad for k, t in params.items() if t.grad is not None},
                state, lr, config.weight_decay, (config.beta1, config.beta2), config.adam_eps,
            )  # fmt: skip
            row = {"step": step, "epoch": epoch, "lr": lr, **report.row()}
            runlog.steps.append(row)
            epoch_losses.append(row["total"])
            step += 1
        if not epoch_losses:
            break
        top1 = evaluate(params, eval_set, config.patch_size)
        prof = profile(params, eval_patches)
        runlog.epochs.append(EpochRecord(epoch, float(np.mean(epoch_losses)), top1, prof))
        log.info("epoch %d loss %.4f top1 %.3f P[0] %.3f P[L] %.3f",
                 epoch, np.mean(epoch_losses), top1, prof.first(), prof.last())
        if out:
            save_checkpoint(params, out / "last.dpck")
            if top1 > best:
                best = top1
                save_checkpoint(params, out / "best.dpck")
    params.zero_grad()
    if out:
        runlog.write_metrics(out / "metrics.csv")
        runlog.write_epochs(out / "epochs.csv")
    return runlog


def train_baseline(config: TrainConfig, steps: int, data: tuple[Dataset, Dataset] | None = None) -> list[float]:
    """Plain ViT training (class-token cross entropy only), kept separate from
    :func:`train` so the two can be compared step by step."""
    model_cfg = config.model_config()
    train_set, _ = data if data is not None else load_splits(config.dataset_spec(), config.seed)
    total_steps = (len(train_set) // config.batch_size) * config.total_epochs
    warmup = _warmup(config, total_steps)
    params = init_params(model_cfg, config.seed)
    state = AdamWState()
    losses = []
    step = 0
    for epoch in range(config.total_epochs):
        for batch in batches(train_set, config.batch_size, config.seed, epoch, config.patch_size):
            if step >= steps:
                return losses
            _, drop_rng = step_rngs(config.seed, epoch, step)
            params.zero_grad()
            logits, _ = forward(params, batch.patches, train_mode=True, rng=drop_rng)
            onehot = np.zeros((len(batch.labels), config.num_classes), dtype=np.float32)
            onehot[np.arange(len(batch.labels)), batch.labels] = 1.0
            loss = soft_cross_entropy(logits, onehot)
            ag.backward(loss)
            adamw_step(
                {k: t.data for k, t in params.items()},
                {k: t.grad for k, t in params.items() if t.grad is not None},
                state, lr_schedule(step + 1, warmup, total_steps, config.lr),
                config.weight_decay, (config.beta1, config.beta2), config.adam_eps,
            )  # fmt: skip
            losses.append(float(loss.data))
            step += 1
    return losses


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

COMPONENTS = {"cos": "alpha_cos", "contrastive": "alpha_contrastive", "mixing": "alpha_mixing"}


def ablation_grid(subset) -> list[dict[str, bool]]:
    """Every on/off assignment of the requested components (others off)."""
    unknown = set(subset) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown loss components {sorted(unknown)}")
    subset = [c for c in COMPONENTS if c in set(subset)]
    grid = []
    for bits in itertools.product([False, True], repeat=len(subset)):
        on = dict(zip(subset, bits))
        grid.append({c: on.get(c, False) for c in COMPONENTS})
    return grid


def ablation_configs(config: TrainConfig, subset) -> list[tuple[dict[str, bool], TrainConfig]]:
    runs = []
    for combo in ablation_grid(subset):
        name = "_".join(f"{c}{int(on)}" for c, on in combo.items())
        changes = {COMPONENTS[c]: 1.0 if on else 0.0 for c, on in combo.items()}
        if config.output_dir:
            changes["output_dir"] = str(Path(config.output_dir) / name)
        runs.append((combo, config.replace(**changes)))
    return runs


def ablate(config: TrainConfig, subset=("cos", "contrastive", "mixing"), data=None) -> list[dict]:
    """Train every loss combination with a shared seed; rows mirror the
    on/off x (accuracy, final-layer P) layout of an ablation table."""
    if data is None:
        data = load_splits(config.dataset_spec(), config.seed)
    rows = []
    for combo, cfg in ablation_configs(config, subset):
        runlog = train(cfg, data=data)
        last = runlog.epochs[-1] if runlog.epochs else None
        rows.append(
            {
                **{c: int(on) for c, on in combo.items()},
                "top1": last.eval_top1 if last else float("nan"),
                "final_p": last.profile.last() if last else float("nan"),
                "config_hash": cfg.hash(),
            }
        )
    if config.output_dir:
        write_ablation_csv(rows, Path(config.output_dir) / "ablation.csv")
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["cos", "contrastive", "mixing", "top1", "final_p", "config_hash"])
        w.writeheader()
        w.writerows(rows)
