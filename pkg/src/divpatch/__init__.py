"""Patch-diversification losses for vision transformers, on a small numpy autograd engine."""

from .autograd import Tensor, backward, finite_diff_check
from .losses import LossWeights, combined_loss, contrastive_loss, cosine_loss, mixing_loss
from .metrics import DiversityProfile, patch_cosine, profile, read_dump, write_dump
from .mixing import MixSpec, MixedBatch, mix_batch, mix_pair
from .vit import ModelConfig, ViTParams, forward, init_params, patchify, unpatchify

__all__ = [
    "Tensor", "backward", "finite_diff_check",
    "LossWeights", "combined_loss", "contrastive_loss", "cosine_loss", "mixing_loss",
    "DiversityProfile", "patch_cosine", "profile", "read_dump", "write_dump",
    "MixSpec", "MixedBatch", "mix_batch", "mix_pair",
    "ModelConfig", "ViTParams", "forward", "init_params", "patchify", "unpatchify",
]  # fmt: skip
