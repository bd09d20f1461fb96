"""
Tests for the Great Expectations dataset gate.

They show:
1. How validation passes with good records
2. How validation fails and blocks the write with bad records
"""

import dataclasses

import pytest

from ge.run_checkpoint import main as run_checkpoint
from ge.validate_dataset import DatasetValidationError, records_to_frame, split_leaks, validate_dataset_records
from pipeline.storage import DatasetHeader, DatasetRecord, save_dataset, split_counts
from simulation.quantize import STOP, VelocitySequence
from simulation.scene import MagnitudeBand, Vec3


@pytest.fixture
def good_records(make_body, make_scene, make_force):
    records = []
    for seed, split in ((1, "train"), (2, "val"), (3, "test")):
        scene = make_scene([make_body(0, (1.5, 1.5, 0.2)), make_body(1, (2.5, 1.0, 0.2), category="chair")], seed=seed)
        for body_id, label in ((0, (0, STOP)), (1, (STOP,))):
            force = make_force(body_id, (8.0, 0.0, 0.0), pixel=(30.0, 40.0), band=MagnitudeBand.MEDIUM)
            records.append(DatasetRecord(scene, force, VelocitySequence(label), split))
    return records


def test_validation_with_good_data(good_records):
    """Records from well-formed scenes pass every expectation."""
    print("\n" + "=" * 70)
    print("TEST 1: Validation with GOOD data")
    print("=" * 70)

    results = validate_dataset_records(good_records)
    assert results.success
    print(f"✓ {len(good_records)} records passed")


def test_validation_with_bad_data(good_records):
    """A vertical force, an impossible magnitude and an unknown split all fail."""
    print("\n" + "=" * 70)
    print("TEST 2: Validation with BAD data")
    print("=" * 70)

    bad = list(good_records)
    first = bad[0]
    bad[0] = dataclasses.replace(first, force=dataclasses.replace(first.force, force=Vec3(8.0, 0.0, 3.0)))
    bad[1] = dataclasses.replace(bad[1], force=dataclasses.replace(bad[1].force, force=Vec3(100.0, 0.0, 0.0)))
    bad[2] = dataclasses.replace(bad[2], split="holdout")

    with pytest.raises(DatasetValidationError) as info:
        validate_dataset_records(bad)
    failed = " ".join(info.value.failed)
    assert "force_z" in failed
    assert "magnitude" in failed
    assert "split" in failed
    print(f"✗ blocked: {info.value}")


def test_impact_outside_image_fails(good_records):
    record = good_records[0]
    moved = dataclasses.replace(record, force=dataclasses.replace(record.force, impact_point_2d=(70.0, 10.0)))
    with pytest.raises(DatasetValidationError) as info:
        validate_dataset_records([moved] + good_records[1:])
    assert any("impact_u" in f for f in info.value.failed)


def test_scene_in_two_splits_fails(good_records):
    leaked = dataclasses.replace(good_records[1], split="test")
    assert split_leaks(records_to_frame([good_records[0], leaked])) == [1]
    with pytest.raises(DatasetValidationError) as info:
        validate_dataset_records([good_records[0], leaked] + good_records[2:])
    assert any("split_hygiene" in f for f in info.value.failed)


def test_empty_batch_is_rejected():
    with pytest.raises(DatasetValidationError):
        validate_dataset_records([])


def test_frame_flattening(good_records):
    df = records_to_frame(good_records)
    assert len(df) == 6
    assert set(df["category"]) == {"box", "chair"}
    assert df.loc[1, "label"] == "17"
    assert df.loc[0, "label_length"] == 2


def test_checkpoint_script(tmp_path, good_records):
    path = tmp_path / "data.fsd"
    header = DatasetHeader(config={}, counts=split_counts(good_records), seed=0)
    save_dataset(path, header, good_records)
    assert run_checkpoint([str(path)]) == 0
    assert run_checkpoint([str(tmp_path / "missing.fsd")]) == 2
    assert run_checkpoint([]) == 1
