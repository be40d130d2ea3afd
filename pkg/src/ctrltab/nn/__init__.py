"""Minimal float64 tensor/differentiation kernel for the retriever and generator."""

from .layers import (
    ModelConfig,
    ParameterSet,
    TrainConfig,
    decoder_forward,
    encoder_forward,
    init_seq2seq_params,
    tied_logits,
)
from .optim import AdamHyper, AdamState, adam_step, collect_grads
from .gradcheck import gradient_check
from .checkpoint import load_checkpoint, params_from_tensors, save_checkpoint
from .tensor import Tensor, backward, cross_entropy

__all__ = [
    "AdamHyper",
    "AdamState",
    "ModelConfig",
    "ParameterSet",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "backward",
    "collect_grads",
    "cross_entropy",
    "decoder_forward",
    "encoder_forward",
    "gradient_check",
    "init_seq2seq_params",
    "load_checkpoint",
    "params_from_tensors",
    "save_checkpoint",
    "tied_logits",
]
