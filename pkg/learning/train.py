"""
SGD-with-momentum training loop for the recurrent predictor.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from learning.encode import EncodedSample
from learning.loss import LossStats, sequence_loss
from learning.net import ModelConfig, PredictorParams, backward, forward, init_params
from simulation.quantize import MAX_STEPS, ClassWeights, class_weights
from simulation.settings import env_bool, env_int

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "lr_at",
    "sequence_loss",
    "smoothed",
    "train",
]


class TrainingDivergedError(ValueError):
    """Loss became NaN/inf; carries the learning rate and batch that caused it."""

    def __init__(self, message: str, iteration: int, lr: float, batch_ids: list[int]):
        super().__init__(message)
        self.iteration = iteration
        self.lr = lr
        self.batch_ids = batch_ids


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    iterations: int = 2000
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    schedule: str = "geometric"
    momentum: float = 0.9
    seed: int = 0
    steps: int = MAX_STEPS
    reproducible: bool = True
    workers: int = 1
    log_every: int = 100

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if self.schedule != "geometric":
            raise ValueError(f"unsupported schedule {self.schedule!r}")

    @classmethod
    def from_env(cls, **overrides) -> "TrainConfig":
        values = dict(
            reproducible=env_bool("REPRODUCIBLE", True),
            workers=env_int("WORKERS", 1),
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    params: PredictorParams
    loss_history: list[float]
    weights: ClassWeights
    stats: LossStats = field(default_factory=LossStats)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Geometric decay from lr_start at iteration 0 to lr_end at the last iteration."""
    if config.iterations <= 1:
        return config.lr_start
    frac = min(iteration, config.iterations - 1) / (config.iterations - 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


def smoothed(history: list[float], window: int = 100) -> np.ndarray:
    """Trailing moving average; shorter than the history by window - 1."""
    values = np.asarray(history, dtype=float)
    if len(values) < window:
        return values[:0]
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def _sample_grad(params, sample, weights):
    """Loss, gradients and the number of clamped probabilities for one sample."""
    outputs, trace = forward(params, sample)
    local = LossStats()
    loss = sequence_loss(outputs, sample.label, weights, local)
    return loss, backward(params, trace, sample.label, weights), local.clamped


def _batch_grads(params, batch, weights, stats, config: TrainConfig):
    """Mean loss and mean gradient over the batch; clamp counts are added to stats."""
    if config.workers <= 1:
        results = [_sample_grad(params, s, weights) for s in batch]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_sample_grad, params, s, weights) for s in batch]
            # reproducible mode reduces in submission order
            order = futures if config.reproducible else list(as_completed(futures))
            results = [f.result() for f in order]

    total_loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for loss, g, clamped in results:
        total_loss += float(loss)
        stats.clamped += clamped
        for k in grads:
            grads[k] += g[k]
    n = len(results)
    for k in grads:
        grads[k] /= n
    return total_loss / n, grads


def sgd_step(params: PredictorParams, grads, velocity, lr: float, momentum: float) -> None:
    for k, g in grads.items():
        velocity[k] = momentum * velocity[k] - lr * g
        params.tensors[k] += velocity[k].astype(params.tensors[k].dtype)
    params.bump()


def train(
    dataset: list[EncodedSample],
    model_config: ModelConfig,
    config: TrainConfig | None = None,
    weights: ClassWeights | None = None,
) -> TrainResult:
    config = config or TrainConfig()
    if not dataset:
        raise ValueError("training set is empty")
    if weights is None:
        weights = class_weights([s.label for s in dataset], config.steps)

    params = init_params(config.seed, model_config)
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    stats = LossStats()
    history: list[float] = []
    batch_size = min(config.batch_size, len(dataset))

    logger.info(
        "training on %d samples: %d iterations, batch %d, lr %.0e -> %.0e",
        len(dataset), config.iterations, batch_size, config.lr_start, config.lr_end,
    )
    for it in range(config.iterations):
        lr = lr_at(it, config)
        batch_ids = sorted(int(i) for i in rng.choice(len(dataset), size=batch_size, replace=False))
        loss, grads = _batch_grads(params, [dataset[i] for i in batch_ids], weights, stats, config)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"loss is {loss} at iteration {it} (lr={lr:.3e}, batch={batch_ids})",
                iteration=it,
                lr=lr,
                batch_ids=batch_ids,
            )
        sgd_step(params, grads, velocity, lr, config.momentum)
        history.append(loss)
        if config.log_every and (it + 1) % config.log_every == 0:
            logger.info("iter %d/%d loss %.4f lr %.2e", it + 1, config.iterations, loss, lr)

    if stats.clamped:
        logger.warning("%d labelled probabilities were clamped during training", stats.clamped)
    return TrainResult(params=params, loss_history=history, weights=weights, stats=stats)
