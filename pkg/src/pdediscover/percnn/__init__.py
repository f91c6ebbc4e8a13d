"""Reconstruction network: recurrent product block, initial-state generator, training."""

from .checkpoint import load_checkpoint, save_checkpoint
from .interpret import expand, interpret
from .model import (IsgConfig, PiBlockConfig, PiBlockModel, TrainConfig, interpolate, isg_forward,
                    pi_block_forward, reconstruct, reconstruction_loss, rollout)
from .training import HISTORY_COLUMNS, evaluate_loss, loss_and_grads, pretrain_isg, train, zero_dynamics_loss

__all__ = [
    "IsgConfig", "PiBlockConfig", "PiBlockModel", "TrainConfig", "interpolate", "isg_forward",
    "pi_block_forward", "reconstruct", "reconstruction_loss", "rollout", "expand", "interpret",
    "load_checkpoint", "save_checkpoint", "HISTORY_COLUMNS", "evaluate_loss", "loss_and_grads",
    "pretrain_isg", "train", "zero_dynamics_loss",
]
