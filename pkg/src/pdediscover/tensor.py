"""Field tensors, circular convolution, the autodiff tape and Adam in one namespace."""

from .autodiff import Node, Tape, backward
from .conv import circular_pad, conv2d_circular
from .field import as_field, decode_pft, encode_pft, read_pft, write_pft
from .optim import AdamState, adam_step, run_adam

__all__ = [
    "Node", "Tape", "backward", "circular_pad", "conv2d_circular", "as_field", "decode_pft", "encode_pft",
    "read_pft", "write_pft", "AdamState", "adam_step", "run_adam",
]
