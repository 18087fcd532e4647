"""Masked visual reconstruction in language semantic space.

Thin Python surface over the C++ core: mask sampling, the contrastive and
reconstruction losses, the cosine schedule, corpus generation, and full
pretraining/evaluation runs.
"""

from ._core import (
    ConfigError,
    ContractError,
    DataError,
    ShapeError,
    contrastive_loss,
    default_config,
    gen_dataset,
    gradcheck,
    l2_normalize,
    lr_at,
    matched_set,
    patch_text_distribution,
    pretrain,
    reconstruction_loss_language,
    sample_mask,
    softmax,
    tokenize,
    zero_shot,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "ShapeError",
    "contrastive_loss",
    "default_config",
    "gen_dataset",
    "gradcheck",
    "l2_normalize",
    "lr_at",
    "matched_set",
    "patch_text_distribution",
    "pretrain",
    "reconstruction_loss_language",
    "sample_mask",
    "softmax",
    "tokenize",
    "zero_shot",
]
