"""
Tests for the dataset, model and report files.
"""

import json

import numpy as np
import pytest

from learning.baselines import build_index, init_regression
from learning.encode import EncodedSample
from learning.evaluate import EvalReport
from learning.net import init_params, preset
from pipeline.storage import (
    MODEL_MAGIC,
    ArtifactError,
    DatasetHeader,
    DatasetRecord,
    ModelArtifact,
    decode_dataset,
    decode_model,
    encode_dataset,
    encode_model,
    encode_report,
    load_dataset,
    load_model,
    load_report,
    save_dataset,
    save_model,
    save_report,
    sha256_file,
    split_counts,
)
from simulation.quantize import STOP, VelocitySequence
from simulation.scene import MagnitudeBand

MODEL = preset("tiny", image_size=16)


@pytest.fixture
def records(make_body, make_scene, make_force):
    out = []
    for seed, split in ((11, "train"), (12, "test")):
        scene = make_scene([make_body(0, (1.5, 1.5, 0.2)), make_body(1, (2.5, 1.0, 0.2), category="lamp")], seed=seed)
        out.append(DatasetRecord(scene, make_force(0, (9.0, 1.0, 0.0)), VelocitySequence((3, STOP)), split))
        out.append(
            DatasetRecord(
                scene,
                make_force(1, (0.0, -3.0, 0.0), band=MagnitudeBand.SMALL),
                VelocitySequence((STOP,)),
                split,
            )
        )
    return out


def _header(records) -> DatasetHeader:
    return DatasetHeader(config={"sim": {"dt": 0.1}}, counts=split_counts(records), seed=5, excluded=2)


def _sample(seed: int) -> EncodedSample:
    rng = np.random.default_rng(seed)
    return EncodedSample(
        rgbm=rng.uniform(size=(4, 16, 16)),
        force_image=rng.uniform(size=(3, 16, 16)),
        label=VelocitySequence((seed % 17, STOP)),
    )


def _artifact(kind: str) -> ModelArtifact:
    if kind == "regression":
        return ModelArtifact("regression", init_regression(1, MODEL), meta={"seed": 1})
    params = init_params(1, MODEL)
    index = build_index(params, [_sample(i) for i in range(4)]) if kind == "nn" else None
    return ModelArtifact(kind, params, meta={"seed": 1, "note": "unit"}, index=index)


def test_dataset_round_trip(tmp_path, records):
    path = tmp_path / "data.fsd"
    digest = save_dataset(path, _header(records), records)
    assert digest == sha256_file(path)

    header, loaded = load_dataset(path)
    assert header.counts == {"train": 2, "val": 0, "test": 2}
    assert header.excluded == 2
    assert header.config_hash == _header(records).config_hash
    assert loaded == records
    assert [r.category for r in loaded] == ["box", "lamp", "box", "lamp"]


def test_dataset_encoding_is_stable(records):
    data = encode_dataset(_header(records), records)
    assert encode_dataset(*decode_dataset(data)) == data


def test_dataset_header_counts_must_match(records):
    bad = DatasetHeader(config={}, counts={"train": 5, "val": 0, "test": 0}, seed=0)
    with pytest.raises(ArtifactError):
        encode_dataset(bad, records)


def test_dataset_truncated_file_is_rejected(records):
    data = encode_dataset(_header(records), records)
    truncated = b"\n".join(data.split(b"\n")[:3]) + b"\n"
    with pytest.raises(ArtifactError, match="announces"):
        decode_dataset(truncated)


def test_dataset_wrong_magic(tmp_path):
    path = tmp_path / "x.fsd"
    path.write_text(json.dumps({"magic": "NOPE"}) + "\n")
    with pytest.raises(ArtifactError, match="magic"):
        load_dataset(path)
    with pytest.raises(ArtifactError, match="does not exist"):
        load_dataset(tmp_path / "missing.fsd")


@pytest.mark.parametrize("kind", ["predictor", "regression", "nn"])
def test_model_round_trip_is_byte_identical(tmp_path, kind):
    artifact = _artifact(kind)
    path = tmp_path / f"{kind}.fsm"
    save_model(path, artifact)
    loaded = load_model(path)

    assert loaded.kind == kind
    assert loaded.params.config == artifact.params.config
    assert loaded.meta == artifact.meta
    for name in artifact.params.names():
        np.testing.assert_array_equal(loaded.params[name], artifact.params[name])
        assert loaded.params[name].dtype == artifact.params[name].dtype
    if kind == "nn":
        np.testing.assert_array_equal(loaded.index.embeddings, artifact.index.embeddings)
        assert loaded.index.labels == artifact.index.labels
    assert encode_model(loaded) == path.read_bytes()


def test_model_file_starts_with_magic():
    assert encode_model(_artifact("predictor"))[:4] == MODEL_MAGIC


def test_model_bad_magic_and_truncation():
    data = encode_model(_artifact("predictor"))
    with pytest.raises(ArtifactError, match="magic"):
        decode_model(b"XXXX" + data[4:])
    with pytest.raises(ArtifactError):
        decode_model(data[:-8])
    with pytest.raises(ArtifactError, match="truncated"):
        decode_model(data[:3])


def test_nn_kind_requires_index():
    with pytest.raises(ArtifactError):
        ModelArtifact("nn", init_params(0, MODEL))
    with pytest.raises(ArtifactError):
        ModelArtifact("forest", init_params(0, MODEL))


def _report() -> EvalReport:
    return EvalReport(
        strict_accuracy=0.25,
        relaxed={k: 0.25 + 0.1 * k for k in range(5)},
        edit_curve={d: min(1.0, 0.25 + 0.2 * d) for d in range(6)},
        per_category={"box": 0.5, "lamp": 0.0},
        n_samples=4,
        n_distinct_gt_patterns=3,
        majority_accuracy=0.5,
        chance_level=0.01,
    )


def test_report_round_trip(tmp_path):
    path = tmp_path / "report.json"
    save_report(path, _report(), {"seed": 3, "command": ["eval"]})
    report, provenance = load_report(path)
    assert report == _report()
    assert provenance == {"seed": 3, "command": ["eval"]}

    doc = json.loads(path.read_text())
    assert doc["schema_version"] == 1
    assert set(doc["report"]["relaxed"]) == {"0", "1", "2", "3", "4"}


def test_report_encoding_is_deterministic():
    assert encode_report(_report(), {"a": 1, "b": 2}) == encode_report(_report(), {"b": 2, "a": 1})


def test_report_schema_is_checked(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema_version": 99, "report": {}}))
    with pytest.raises(ArtifactError, match="schema"):
        load_report(path)
    path.write_text("{not json")
    with pytest.raises(ArtifactError):
        load_report(path)
