"""
Direction vocabulary, velocity quantization, label extraction and per-step
inverse-frequency class weights.

Tokens are plain ints: 0-7 horizontal at azimuths k*45°, 8-15 the same
azimuths at -45° elevation, 16 straight down, 17 stop.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from simulation.physics import SimConfig, SimTrace

logger = logging.getLogger(__name__)

NUM_DIRECTIONS = 17
STOP = 17
NUM_CLASSES = 18
MAX_STEPS = 6


class ExtractionError(ValueError):
    """Trace cannot be turned into a label (did not settle)."""


@dataclass(frozen=True)
class DirectionVocabulary:
    directions: np.ndarray  # (17, 3) unit vectors
    stop_index: int = STOP

    @property
    def num_classes(self) -> int:
        return len(self.directions) + 1

    def angles(self) -> np.ndarray:
        """Pairwise angular distances in radians, (17, 17)."""
        cos = np.clip(self.directions @ self.directions.T, -1.0, 1.0)
        return np.arccos(cos)


@lru_cache(maxsize=1)
def build_vocabulary() -> DirectionVocabulary:
    dirs = []
    for k in range(8):
        a = math.radians(45.0 * k)
        dirs.append((math.cos(a), math.sin(a), 0.0))
    s = 1.0 / math.sqrt(2.0)
    for k in range(8):
        a = math.radians(45.0 * k)
        dirs.append((math.cos(a) * s, math.sin(a) * s, -s))
    dirs.append((0.0, 0.0, -1.0))
    directions = np.array(dirs)
    directions.setflags(write=False)
    return DirectionVocabulary(directions=directions)


def min_separation() -> float:
    """Closed-form smallest angle between two vocabulary directions (neighbours on the -45° ring)."""
    return 2.0 * math.asin(math.sin(math.radians(22.5)) * math.cos(math.radians(45.0)))


def covering_radius() -> float:
    """Largest angle from any lower-hemisphere vector to its nearest vocabulary direction."""
    half = math.radians(22.5)
    ring = math.radians(45.0)
    elevation = math.atan(math.cos(half) * (1.0 - math.cos(ring)) / math.sin(ring))
    return math.acos(math.cos(elevation) * math.cos(half))


def token_name(token: int) -> str:
    if token == STOP:
        return "stop"
    if token == 16:
        return "down"
    ring = "h" if token < 8 else "d"
    return f"{ring}{45 * (token % 8)}"


@dataclass(frozen=True)
class VelocitySequence:
    tokens: tuple[int, ...]

    def __post_init__(self):
        tokens = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if not 1 <= len(tokens) <= MAX_STEPS:
            raise ValueError(f"sequence length must be in [1, {MAX_STEPS}], got {len(tokens)}")
        if any(not 0 <= t < NUM_CLASSES for t in tokens):
            raise ValueError(f"token out of range in {tokens}")
        if STOP in tokens[:-1]:
            raise ValueError(f"stop may only end a sequence: {tokens}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __str__(self) -> str:
        return " ".join(token_name(t) for t in self.tokens)

    @classmethod
    def from_tokens(cls, tokens) -> "VelocitySequence":
        """Truncate at the first stop (inclusive) and cap at MAX_STEPS."""
        out = []
        for t in list(tokens)[:MAX_STEPS]:
            out.append(int(t))
            if t == STOP:
                break
        return cls(tuple(out))

    def padded(self, length: int = MAX_STEPS) -> tuple[int, ...]:
        return self.tokens + (STOP,) * (length - len(self.tokens))

    def to_list(self) -> list[int]:
        return list(self.tokens)


def quantize_velocity(v, vocab: DirectionVocabulary, stop_speed: float) -> int:
    """Nearest vocabulary direction by angle, or STOP below stop_speed."""
    v = np.asarray(v, dtype=float)
    speed = float(np.linalg.norm(v))
    if speed < stop_speed:
        return STOP
    # np.argmax returns the first maximum, so ties go to the lowest index
    return int(np.argmax(vocab.directions @ (v / speed)))


def sample_steps(cfg: SimConfig, length: int = MAX_STEPS) -> list[int]:
    return [k * cfg.sample_stride for k in range(length)]


def extract_sequence(trace: SimTrace, vocab: DirectionVocabulary, cfg: SimConfig) -> VelocitySequence:
    if not trace.converged:
        raise ExtractionError(f"trace for body {trace.target_id} did not converge")
    last = len(trace.states) - 1
    tokens = [
        quantize_velocity(trace.states[min(k, last)].velocity, vocab, cfg.stop_speed)
        for k in sample_steps(cfg)
    ]
    return VelocitySequence.from_tokens(tokens)


@dataclass(frozen=True)
class ClassWeights:
    q: np.ndarray  # (T, 18)
    counts: np.ndarray  # (T, 18)

    @classmethod
    def uniform(cls, steps: int = MAX_STEPS) -> "ClassWeights":
        return cls(q=np.ones((steps, NUM_CLASSES)), counts=np.zeros((steps, NUM_CLASSES)))

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "counts": self.counts.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassWeights":
        return cls(q=np.array(d["q"], dtype=float), counts=np.array(d["counts"], dtype=float))


def class_weights(sequences: list[VelocitySequence], steps: int = MAX_STEPS) -> ClassWeights:
    """Per-step inverse class frequency, capped at N and normalised to mean 1 over observed cells."""
    if not sequences:
        raise ValueError("class_weights needs at least one sequence")
    n = len(sequences)
    counts = np.zeros((steps, NUM_CLASSES))
    for seq in sequences:
        for t, token in enumerate(seq.padded(steps)):
            counts[t, token] += 1
    raw = np.minimum(n / np.maximum(counts, 1.0), float(n))
    observed = counts > 0
    q = raw / raw[observed].mean()
    logger.debug("class weights from %d sequences, %d observed cells", n, int(observed.sum()))
    return ClassWeights(q=q, counts=counts)
