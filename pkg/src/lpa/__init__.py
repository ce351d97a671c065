"""Desk-scale decoder-only transformer lab for low-rank projected attention."""

from lpa.accounting import allocate_surplus, count_attention_flops, count_params
from lpa.checkpoint import load_checkpoint, save_checkpoint
from lpa.config import ConfigError, ModelConfig, PlacementSpec, get_preset
from lpa.kernels import BACKEND
from lpa.layers import AttentionLayer, DenseLinear, FactoredLinear, FeedForward
from lpa.model import Model, build_model, generate, lm_loss
from lpa.numerics import Tensor, backward, grad_check
from lpa.training import TrainConfig, evaluate_ppl, run_seeds, train

__version__ = "0.1.0"

__all__ = [
    "AttentionLayer",
    "BACKEND",
    "ConfigError",
    "DenseLinear",
    "FactoredLinear",
    "FeedForward",
    "Model",
    "ModelConfig",
    "PlacementSpec",
    "Tensor",
    "TrainConfig",
    "allocate_surplus",
    "backward",
    "build_model",
    "count_attention_flops",
    "count_params",
    "evaluate_ppl",
    "generate",
    "get_preset",
    "grad_check",
    "lm_loss",
    "load_checkpoint",
    "run_seeds",
    "save_checkpoint",
    "train",
]
