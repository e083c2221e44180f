"""Mini-batch SGD with momentum and a step-decay learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import TRAIN, softmax_cross_entropy

BASE_LR = 0.01
MOMENTUM = 0.9
DECAY_FACTOR = 0.9
DECAY_EVERY = 10000
MAX_ITERATIONS = 500000


class TrainingDivergedError(FloatingPointError):
    """Raised when the loss stops being finite."""

    def __init__(self, iteration: int, lr: float, batch_id, loss: float):
        self.iteration, self.lr, self.batch_id, self.loss = iteration, lr, batch_id, loss
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration} (lr={lr:g}, batch {batch_id})")


def learning_rate(iteration: int, base_lr: float = BASE_LR, decay_factor: float = DECAY_FACTOR,
                  decay_every: int = DECAY_EVERY) -> float:
    """``base_lr * decay_factor ** floor(iteration / decay_every)``."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return base_lr * decay_factor ** (iteration // decay_every)


@dataclass
class SgdState:
    base_lr: float = BASE_LR
    momentum: float = MOMENTUM
    decay_factor: float = DECAY_FACTOR
    decay_every: int = DECAY_EVERY
    max_iterations: int = MAX_ITERATIONS
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, iteration: int | None = None) -> float:
        t = self.iteration if iteration is None else iteration
        return learning_rate(t, self.base_lr, self.decay_factor, self.decay_every)

    def scalars(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "decay_factor": self.decay_factor,
            "decay_every": self.decay_every,
            "max_iterations": self.max_iterations,
            "iteration": self.iteration,
        }

    def copy(self) -> "SgdState":
        return SgdState(**self.scalars(), velocity={k: v.copy() for k, v in self.velocity.items()})


def init_state(params: dict[str, np.ndarray], **settings) -> SgdState:
    state = SgdState(**settings)
    state.velocity = {name: np.zeros_like(p) for name, p in params.items()}
    return state


def apply_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: SgdState) -> None:
    """One in-place momentum step: ``v = mu*v - lr*g; p = p + v``."""
    lr = state.lr()
    mu = state.momentum
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            raise ValueError(f"optimizer state does not match parameter {name!r}")
        v *= mu
        v -= lr * grads[name]
        p += v
    state.iteration += 1


def step(net, batch: np.ndarray, labels: np.ndarray, state: SgdState, batch_id=None) -> float:
    """Forward/backward on one batch and update the trainable parameters.

    Returns the loss measured before the update.
    """
    logits = net.forward(batch, TRAIN)
    loss, grad = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(state.iteration, state.lr(), batch_id, loss)
    grads = net.backward(grad)
    apply_update(net.trainable(), grads, state)
    return loss
