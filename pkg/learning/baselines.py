"""
Baselines sharing the predictor's towers: a direct regression head with a
smooth-L1 loss, exact nearest neighbour on the embedding I, and the
majority-sequence predictor.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from learning.encode import EncodedSample
from learning.loss import regression_target, smooth_l1, smooth_l1_grad
from learning.net import ModelConfig, PredictorParams, embed, embed_backward, embed_forward, param_shapes
from learning.train import TrainConfig, TrainingDivergedError, lr_at, sgd_step
from simulation.quantize import (
    DirectionVocabulary,
    VelocitySequence,
    build_vocabulary,
    quantize_velocity,
)

logger = logging.getLogger(__name__)

# regression targets are unit vectors, so half a unit separates motion from stop
REGRESSION_STOP_SPEED = 0.5
REGRESSION_OUTPUTS = 18


def init_regression(seed: int, config: ModelConfig) -> PredictorParams:
    """Tower tensors as in init_params plus the FC head W_r (18 x E), b_r."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if not name.startswith(("image.", "force.")):
            continue
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, config.init_std, size=shape)
    tensors["W_r"] = rng.normal(0.0, config.init_std, size=(REGRESSION_OUTPUTS, config.embed_dim))
    tensors["b_r"] = np.zeros(REGRESSION_OUTPUTS)
    return PredictorParams(config, {k: v.astype(config.dtype) for k, v in tensors.items()})


def regression_forward(params: PredictorParams, sample: EncodedSample) -> np.ndarray:
    return params["W_r"] @ embed(params, sample) + params["b_r"]


def _regression_grad(params: PredictorParams, sample: EncodedSample, target: np.ndarray):
    embedding, img_cache, frc_cache = embed_forward(params, sample)
    residual = params["W_r"] @ embedding + params["b_r"] - target
    loss = float(smooth_l1(residual).mean())
    d_out = (smooth_l1_grad(residual) / residual.size).astype(params.dtype)
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    grads["W_r"] += np.outer(d_out, embedding)
    grads["b_r"] += d_out
    embed_backward(params, img_cache, frc_cache, params["W_r"].T @ d_out, grads)
    return loss, grads


def train_regression(
    dataset: list[EncodedSample],
    model_config: ModelConfig,
    config: TrainConfig | None = None,
    vocab: DirectionVocabulary | None = None,
) -> tuple[PredictorParams, list[float]]:
    config = config or TrainConfig()
    vocab = vocab or build_vocabulary()
    if not dataset:
        raise ValueError("training set is empty")
    targets = [regression_target(s.label, vocab.directions, config.steps) for s in dataset]
    params = init_regression(config.seed, model_config)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    rng = np.random.default_rng(config.seed)
    batch_size = min(config.batch_size, len(dataset))
    history: list[float] = []

    logger.info("training regression baseline on %d samples for %d iterations", len(dataset), config.iterations)
    for it in range(config.iterations):
        lr = lr_at(it, config)
        batch_ids = sorted(int(i) for i in rng.choice(len(dataset), size=batch_size, replace=False))
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        for i in batch_ids:
            loss, g = _regression_grad(params, dataset[i], targets[i])
            total += loss
            for k in grads:
                grads[k] += g[k]
        loss = total / batch_size
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"regression loss is {loss} at iteration {it}", iteration=it, lr=lr, batch_ids=batch_ids
            )
        for k in grads:
            grads[k] /= batch_size
        sgd_step(params, grads, velocity, lr, config.momentum)
        history.append(loss)
        if config.log_every and (it + 1) % config.log_every == 0:
            logger.info("iter %d/%d regression loss %.4f", it + 1, config.iterations, loss)
    return params, history


def decode_regression(
    outputs: np.ndarray,
    vocab: DirectionVocabulary | None = None,
    stop_speed: float = REGRESSION_STOP_SPEED,
) -> VelocitySequence:
    """Six 3-vectors, each quantized on its own, truncated at the first stop."""
    vocab = vocab or build_vocabulary()
    vectors = np.asarray(outputs, dtype=float).reshape(-1, 3)
    return VelocitySequence.from_tokens(quantize_velocity(v, vocab, stop_speed) for v in vectors)


def predict_regression(
    params: PredictorParams,
    sample: EncodedSample,
    vocab: DirectionVocabulary | None = None,
    stop_speed: float = REGRESSION_STOP_SPEED,
) -> VelocitySequence:
    return decode_regression(regression_forward(params, sample), vocab, stop_speed)


@dataclass(frozen=True)
class NeighborIndex:
    embeddings: np.ndarray  # (N, E) float64
    labels: tuple[VelocitySequence, ...]

    def __post_init__(self):
        if len(self.embeddings) != len(self.labels):
            raise ValueError("index rows and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


def build_index(params: PredictorParams, dataset: list[EncodedSample]) -> NeighborIndex:
    if not dataset:
        return NeighborIndex(np.zeros((0, params.config.embed_dim)), ())
    rows = np.stack([embed(params, s).astype(np.float64) for s in dataset])
    logger.info("built neighbour index over %d embeddings of width %d", *rows.shape)
    return NeighborIndex(embeddings=rows, labels=tuple(s.label for s in dataset))


def nearest(index: NeighborIndex, query: np.ndarray) -> int:
    """Row of the closest embedding; ties go to the lowest row."""
    if len(index) == 0:
        raise ValueError("neighbour index is empty")
    d2 = ((index.embeddings - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def nn_predict(index: NeighborIndex, params: PredictorParams, sample: EncodedSample) -> VelocitySequence:
    return index.labels[nearest(index, embed(params, sample))]


def majority_sequence(labels: list[VelocitySequence]) -> VelocitySequence:
    """Most frequent pattern; ties go to the pattern seen first."""
    if not labels:
        raise ValueError("no labels to take a majority over")
    counts = Counter(labels)
    best = max(counts.values())
    return next(seq for seq in labels if counts[seq] == best)
