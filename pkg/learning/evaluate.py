"""
Sequence metrics: strict accuracy, k-nearest-direction relaxation,
edit-distance curve, per-category breakdown, majority and chance levels.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import Levenshtein
import numpy as np
import pandas as pd

from learning.baselines import majority_sequence
from simulation.quantize import STOP, DirectionVocabulary, VelocitySequence, build_vocabulary
from simulation.scene import MOVABLE_CATEGORIES

logger = logging.getLogger(__name__)

RELAX_KS = tuple(range(5))
EDIT_DS = tuple(range(6))


def strict_correct(pred: VelocitySequence, gt: VelocitySequence) -> bool:
    return pred.tokens == gt.tokens


def neighbor_table(vocab: DirectionVocabulary | None = None) -> np.ndarray:
    """(17, 17) int array: row g lists direction indices by angle from g, ties by index."""
    vocab = vocab or build_vocabulary()
    return _neighbor_table(vocab.directions.tobytes(), len(vocab.directions))


@lru_cache(maxsize=4)
def _neighbor_table(raw: bytes, n: int) -> np.ndarray:
    directions = np.frombuffer(raw).reshape(n, 3)
    angles = np.arccos(np.clip(directions @ directions.T, -1.0, 1.0))
    # rounding keeps float noise from reordering geometrically equal angles
    table = np.array([sorted(range(n), key=lambda j: (round(angles[g, j], 9), j)) for g in range(n)])
    table.setflags(write=False)
    return table


def relaxed_correct(pred: VelocitySequence, gt: VelocitySequence, k: int, vocab: DirectionVocabulary | None = None) -> bool:
    """Lengths match, stop matches only stop, each direction within gt's k+1 nearest."""
    if not 0 <= k <= 16:
        raise ValueError(f"k must be in [0, 16], got {k}")
    if len(pred) != len(gt):
        return False
    table = neighbor_table(vocab)
    for p, g in zip(pred.tokens, gt.tokens):
        if p == STOP or g == STOP:
            if p != g:
                return False
        elif p not in table[g, : k + 1]:
            return False
    return True


def _as_text(seq: VelocitySequence) -> str:
    return "".join(chr(ord("a") + t) for t in seq.tokens)


def edit_distance(pred: VelocitySequence, gt: VelocitySequence) -> int:
    return Levenshtein.distance(_as_text(pred), _as_text(gt))


@dataclass
class EvalReport:
    strict_accuracy: float
    relaxed: dict[int, float]
    edit_curve: dict[int, float]
    per_category: dict[str, float]
    n_samples: int
    n_distinct_gt_patterns: int
    majority_accuracy: float
    chance_level: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "strict_accuracy": self.strict_accuracy,
            "relaxed": {str(k): v for k, v in self.relaxed.items()},
            "edit_curve": {str(d): v for d, v in self.edit_curve.items()},
            "per_category": dict(self.per_category),
            "n_samples": self.n_samples,
            "n_distinct_gt_patterns": self.n_distinct_gt_patterns,
            "majority_accuracy": self.majority_accuracy,
            "chance_level": self.chance_level,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            return cls(
                strict_accuracy=float(d["strict_accuracy"]),
                relaxed={int(k): float(v) for k, v in d["relaxed"].items()},
                edit_curve={int(k): float(v) for k, v in d["edit_curve"].items()},
                per_category={str(k): float(v) for k, v in d["per_category"].items()},
                n_samples=int(d["n_samples"]),
                n_distinct_gt_patterns=int(d["n_distinct_gt_patterns"]),
                majority_accuracy=float(d["majority_accuracy"]),
                chance_level=float(d["chance_level"]),
                extra=dict(d.get("extra", {})),
            )
        except (KeyError, TypeError, AttributeError) as e:
            raise ValueError(f"malformed report: {e}") from e


def evaluate(
    predictions: list[VelocitySequence],
    groundtruth: list[VelocitySequence],
    metadata: list[dict],
    majority: VelocitySequence | None = None,
    vocab: DirectionVocabulary | None = None,
) -> EvalReport:
    """
    Score predictions against ground truth.

    metadata[i] must carry "category" for the target body. majority is the
    most frequent training sequence; when omitted the test set's own
    majority is used.
    """
    if not len(predictions) == len(groundtruth) == len(metadata):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions, {len(groundtruth)} labels, {len(metadata)} metadata rows"
        )
    if not groundtruth:
        raise ValueError("nothing to evaluate")
    vocab = vocab or build_vocabulary()
    majority = majority or majority_sequence(groundtruth)

    frame = pd.DataFrame(
        {
            "category": [m["category"] for m in metadata],
            "strict": [strict_correct(p, g) for p, g in zip(predictions, groundtruth)],
            "edit": [edit_distance(p, g) for p, g in zip(predictions, groundtruth)],
            "majority": [strict_correct(majority, g) for g in groundtruth],
        }
    )
    for k in RELAX_KS:
        frame[f"relaxed_{k}"] = [relaxed_correct(p, g, k, vocab) for p, g in zip(predictions, groundtruth)]

    n_distinct = len(set(groundtruth))
    per_category = frame.groupby("category")["strict"].mean()
    report = EvalReport(
        strict_accuracy=float(frame["strict"].mean()),
        relaxed={k: float(frame[f"relaxed_{k}"].mean()) for k in RELAX_KS},
        edit_curve={d: float((frame["edit"] <= d).mean()) for d in EDIT_DS},
        per_category={str(c): float(v) for c, v in per_category.sort_index().items()},
        n_samples=len(frame),
        n_distinct_gt_patterns=n_distinct,
        majority_accuracy=float(frame["majority"].mean()),
        chance_level=1.0 / n_distinct,
    )
    logger.info(
        "evaluated %d samples: strict %.3f, majority %.3f, chance %.4f",
        report.n_samples, report.strict_accuracy, report.majority_accuracy, report.chance_level,
    )
    return report


def holdout_split(records: list, category: str) -> tuple[list, list, int]:
    """
    Drop train records whose target has the category; the test split is untouched.

    Records need .split and .category. Returns (train, test, removed).
    """
    if category not in MOVABLE_CATEGORIES:
        raise ValueError(f"unknown category {category!r}; choose from {sorted(MOVABLE_CATEGORIES)}")
    train = [r for r in records if r.split == "train"]
    kept = [r for r in train if r.category != category]
    test = [r for r in records if r.split == "test"]
    return kept, test, len(train) - len(kept)
