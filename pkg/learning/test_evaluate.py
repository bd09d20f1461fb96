"""
Tests for the sequence metrics and the category holdout split.
"""

import math
from dataclasses import dataclass

import numpy as np
import pytest

from learning.evaluate import (
    EvalReport,
    edit_distance,
    evaluate,
    holdout_split,
    neighbor_table,
    relaxed_correct,
    strict_correct,
)
from simulation.quantize import STOP, VelocitySequence, build_vocabulary
from simulation.scene import MOVABLE_CATEGORIES

VOCAB = build_vocabulary()


def _random_sequence(rng) -> VelocitySequence:
    length = int(rng.integers(1, 7))
    tokens = [int(t) for t in rng.integers(0, 17, size=length)]
    if length < 6 or rng.random() < 0.5:
        tokens[-1] = STOP
    return VelocitySequence(tuple(tokens))


def _dp_distance(a, b) -> int:
    rows = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    rows[:, 0] = np.arange(len(a) + 1)
    rows[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            rows[i, j] = min(rows[i - 1, j] + 1, rows[i, j - 1] + 1, rows[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(rows[-1, -1])


def test_strict_correct():
    a = VelocitySequence((0, STOP))
    assert strict_correct(a, VelocitySequence((0, STOP)))
    assert not strict_correct(a, VelocitySequence((0, 1, STOP)))
    assert not strict_correct(a, VelocitySequence((1, STOP)))


def test_neighbor_table_matches_exhaustive_ranking():
    table = neighbor_table(VOCAB)
    angles = VOCAB.angles()
    assert table.shape == (17, 17)
    for g in range(17):
        assert table[g, 0] == g
        assert sorted(table[g]) == list(range(17))
        ranked = angles[g, table[g]]
        assert np.all(np.diff(ranked) >= -1e-9)
    assert np.allclose(angles, angles.T)


def test_relaxed_k0_equals_strict():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        p, g = _random_sequence(rng), _random_sequence(rng)
        assert relaxed_correct(p, g, 0, VOCAB) == strict_correct(p, g)


def test_relaxed_k16_accepts_any_direction():
    assert relaxed_correct(VelocitySequence((3, 15, STOP)), VelocitySequence((16, 0, STOP)), 16, VOCAB)
    # stop placement is still strict
    assert not relaxed_correct(VelocitySequence((3, STOP)), VelocitySequence((STOP,)), 16, VOCAB)
    assert not relaxed_correct(VelocitySequence((STOP,)), VelocitySequence((4,)), 16, VOCAB)


def test_relaxed_neighbouring_azimuth():
    pred, gt = VelocitySequence((1, STOP)), VelocitySequence((0, STOP))
    assert 1 in neighbor_table(VOCAB)[0, :2]
    assert relaxed_correct(pred, gt, 1, VOCAB)
    assert not relaxed_correct(pred, gt, 0, VOCAB)


def test_relaxed_is_monotone_in_k():
    rng = np.random.default_rng(1)
    for _ in range(500):
        p, g = _random_sequence(rng), _random_sequence(rng)
        results = [relaxed_correct(p, g, k, VOCAB) for k in range(17)]
        assert results == sorted(results)


def test_edit_distance_examples():
    assert edit_distance(VelocitySequence((0, STOP)), VelocitySequence((0, STOP))) == 0
    assert edit_distance(VelocitySequence((0, STOP)), VelocitySequence((0, 1, STOP))) == 1
    assert edit_distance(VelocitySequence((STOP,)), VelocitySequence((0, 1, 2, STOP))) == 3


def test_edit_distance_matches_dynamic_programming():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        a, b = _random_sequence(rng), _random_sequence(rng)
        assert edit_distance(a, b) == _dp_distance(a.tokens, b.tokens)
        assert edit_distance(a, b) == edit_distance(b, a)


def test_edit_distance_triangle_inequality():
    rng = np.random.default_rng(3)
    for _ in range(300):
        a, b, c = (_random_sequence(rng) for _ in range(3))
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_evaluate_perfect_predictions():
    rng = np.random.default_rng(4)
    gt = [_random_sequence(rng) for _ in range(40)]
    meta = [{"category": MOVABLE_CATEGORIES[i % 3]} for i in range(40)]
    report = evaluate(gt, gt, meta)
    assert report.strict_accuracy == 1.0
    assert set(report.relaxed.values()) == {1.0}
    assert set(report.edit_curve.values()) == {1.0}
    assert set(report.per_category.values()) == {1.0}
    assert report.n_samples == 40
    assert report.n_distinct_gt_patterns == len(set(gt))
    assert report.chance_level == pytest.approx(1.0 / len(set(gt)))


def test_evaluate_all_stop_predictions():
    stop = VelocitySequence((STOP,))
    gt = [stop, VelocitySequence((0, STOP))] * 10
    meta = [{"category": "chair"}] * 20
    report = evaluate([stop] * 20, gt, meta, majority=stop)
    assert report.strict_accuracy == 0.5
    assert report.majority_accuracy == 0.5
    assert report.n_distinct_gt_patterns == 2
    assert report.edit_curve[1] == 1.0


def test_evaluate_identities_and_monotonicity():
    rng = np.random.default_rng(5)
    gt = [_random_sequence(rng) for _ in range(200)]
    preds = [g if rng.random() < 0.3 else _random_sequence(rng) for g in gt]
    meta = [{"category": MOVABLE_CATEGORIES[i % 10]} for i in range(200)]
    report = evaluate(preds, gt, meta)
    assert report.relaxed[0] == report.strict_accuracy
    assert report.edit_curve[0] == report.strict_accuracy
    relaxed = [report.relaxed[k] for k in range(5)]
    curve = [report.edit_curve[d] for d in range(6)]
    assert relaxed == sorted(relaxed) and curve == sorted(curve)
    assert set(report.per_category) == set(MOVABLE_CATEGORIES)
    assert all(0.0 <= v <= 1.0 for v in relaxed + curve)


def test_evaluate_length_mismatch():
    seq = VelocitySequence((STOP,))
    with pytest.raises(ValueError):
        evaluate([seq, seq], [seq], [{"category": "box"}])


def test_report_round_trip():
    seq = VelocitySequence((STOP,))
    report = evaluate([seq], [seq], [{"category": "box"}])
    assert EvalReport.from_dict(report.to_dict()) == report
    with pytest.raises(ValueError):
        EvalReport.from_dict({"strict_accuracy": 1.0})


@dataclass
class _Record:
    split: str
    category: str


def test_holdout_split_partition():
    records = [_Record(split, cat) for split in ("train", "val", "test") for cat in MOVABLE_CATEGORIES for _ in range(2)]
    train = [r for r in records if r.split == "train"]
    kept, test, removed = holdout_split(records, "chair")
    assert all(r.category != "chair" for r in kept)
    assert removed == 2
    assert len(kept) + removed == len(train)
    assert test == [r for r in records if r.split == "test"]


def test_holdout_unknown_category():
    with pytest.raises(ValueError):
        holdout_split([], "spaceship")


def test_chance_level_is_reciprocal_of_patterns():
    gt = [VelocitySequence((i, STOP)) for i in range(4)]
    report = evaluate(gt, gt, [{"category": "box"}] * 4)
    assert math.isclose(report.chance_level, 0.25)
