"""Weighted sequence cross-entropy and the smooth-L1 regression loss."""

import logging
from dataclasses import dataclass

import numpy as np

from simulation.quantize import MAX_STEPS, ClassWeights, VelocitySequence

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class LossStats:
    clamped: int = 0


def sequence_loss(
    outputs: np.ndarray,
    label: VelocitySequence,
    weights: ClassWeights,
    stats: LossStats | None = None,
) -> float:
    """
    -(1/T) Σ_t q_t(v_t) log o_t[v_t] with the label padded to T by stop.

    outputs is (T, 18). Probabilities below PROB_FLOOR are clamped and counted.
    """
    steps = outputs.shape[0]
    padded = label.padded(steps)
    total = 0.0
    for t, v in enumerate(padded):
        p = outputs[t, v]
        if p < PROB_FLOOR:
            p = PROB_FLOOR
            if stats is not None:
                stats.clamped += 1
            logger.debug("clamped probability at step %d class %d", t, v)
        total -= weights.q[t, v] * np.log(p)
    return total / steps


def sequence_loss_grad(outputs: np.ndarray, label: VelocitySequence, weights: ClassWeights) -> np.ndarray:
    """d loss / d logits for softmax outputs: (q_t(v_t)/T) (o_t - onehot(v_t))."""
    steps = outputs.shape[0]
    grad = outputs.copy()
    for t, v in enumerate(label.padded(steps)):
        grad[t, v] -= 1.0
        grad[t] *= weights.q[t, v] / steps
    return grad


def smooth_l1(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    """Elementwise Huber loss."""
    r = np.abs(residual)
    return np.where(r < delta, 0.5 * r**2, delta * (r - 0.5 * delta))


def smooth_l1_grad(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(residual, -delta, delta)


def regression_target(label: VelocitySequence, vocab_directions: np.ndarray, steps: int = MAX_STEPS) -> np.ndarray:
    """Six unit direction 3-vectors flattened to 18 numbers; stop and padding are zeros."""
    target = np.zeros((steps, 3))
    for t, token in enumerate(label.tokens):
        if token < len(vocab_directions):
            target[t] = vocab_directions[token]
    return target.ravel()
