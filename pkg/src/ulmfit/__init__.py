"""Desk-scale LSTM transfer-learning engine.

Three training stages -- language-model pretraining, target-task LM
fine-tuning, and classifier fine-tuning -- built on a from-scratch
reverse-mode autodiff tape, with discriminative per-layer learning rates,
a slanted triangular schedule, gradual unfreezing, concat pooling, and
chunked document classification with a bounded gradient window.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, backward, grad_check, no_tape, op_forward

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "no_tape",
    "op_forward",
    "__version__",
]
