"""Minimal numpy deep-learning substrate: autodiff tensors, MLPs, Adam, checkpoints."""

from efm.nn.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from efm.nn.mlp import Mlp
from efm.nn.optim import Adam
from efm.nn.tensor import DTYPE, Tensor, concat

__all__ = [
    "Adam",
    "DTYPE",
    "Mlp",
    "Tensor",
    "concat",
    "decode_checkpoint",
    "encode_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
]
