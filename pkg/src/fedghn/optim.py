"""Plain SGD with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StepOutOfRange


@dataclass(frozen=True)
class SGDConfig:
    """Schedule settings shared by every trainer in the package.

    lr0: peak learning rate at step 0.
    total_steps: schedule length; the rate anneals to 0 at this step.
    weight_decay: decoupled L2 coefficient applied inside `sgd_step`.
    clip_norm: global gradient-norm ceiling; None disables clipping.
    """

    lr0: float = 0.009
    total_steps: int = 1
    weight_decay: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


def cosine_lr(step: int, config: SGDConfig) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if step < 0 or step > config.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {config.total_steps}]")
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * step / config.total_steps))


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float,
             weight_decay: float = 0.0) -> np.ndarray:
    """One SGD update, returning the new parameter array."""
    if param.shape != grad.shape:
        raise ShapeError(f"param shape {param.shape} != grad shape {grad.shape}")
    return param - lr * (grad + weight_decay * param)


def clip_gradients(grads: list[np.ndarray], clip_norm: float | None
                   ) -> list[np.ndarray]:
    """Scale the gradient list so its global L2 norm is at most clip_norm.

    A no-op when clip_norm is None or the norm is already within the
    ceiling, so disabling the ceiling never perturbs an update.
    """
    if clip_norm is None:
        return grads
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= clip_norm:
        return grads
    factor = clip_norm / total
    return [g * factor for g in grads]
