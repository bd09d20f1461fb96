"""
On-disk artifacts: the FSD1 dataset (JSON lines), the FSM1 model file
(binary header + JSON manifest + raw tensor payload) and the JSON eval report.

All writers go through atomic_write, which renames a temp file into place.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from learning.baselines import NeighborIndex
from learning.evaluate import EvalReport
from learning.net import ModelConfig, PredictorParams
from simulation.quantize import VelocitySequence
from simulation.scene import ForceApplication, SceneSpec

logger = logging.getLogger(__name__)

DATASET_MAGIC = "FSD1"
DATASET_VERSION = 1
MODEL_MAGIC = b"FSM1"
MODEL_VERSION = 1
REPORT_SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
MODEL_KINDS = ("predictor", "regression", "nn")

_MODEL_PREFIX = struct.Struct("<4sHI")


class ArtifactError(ValueError):
    """An artifact file is missing, truncated or of the wrong format."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class DatasetRecord:
    scene: SceneSpec
    force: ForceApplication
    label: VelocitySequence
    split: str

    @property
    def body_id(self) -> int:
        return self.force.body_id

    @property
    def category(self) -> str:
        return self.scene.body(self.force.body_id).category

    @property
    def scene_seed(self) -> int:
        return self.scene.seed

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "force": self.force.to_dict(),
            "label": self.label.to_list(),
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetRecord":
        return cls(
            scene=SceneSpec.from_dict(d["scene"]),
            force=ForceApplication.from_dict(d["force"]),
            label=VelocitySequence(tuple(d["label"])),
            split=d["split"],
        )


@dataclass(frozen=True)
class DatasetHeader:
    config: dict
    counts: dict
    seed: int
    excluded: int = 0
    failed_scenes: int = 0
    magic: str = DATASET_MAGIC
    version: int = DATASET_VERSION

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def config_hash(self) -> str:
        return sha256_bytes(canonical_json(self.config).encode())

    def to_dict(self) -> dict:
        return {
            "magic": self.magic,
            "version": self.version,
            "config": self.config,
            "counts": self.counts,
            "seed": self.seed,
            "excluded": self.excluded,
            "failed_scenes": self.failed_scenes,
        }


def split_counts(records: list[DatasetRecord]) -> dict[str, int]:
    return {s: sum(1 for r in records if r.split == s) for s in SPLITS}


def encode_dataset(header: DatasetHeader, records: list[DatasetRecord]) -> bytes:
    if header.counts != split_counts(records):
        raise ArtifactError(f"header counts {header.counts} do not match the records")
    lines = [canonical_json(header.to_dict())]
    lines.extend(canonical_json(r.to_dict()) for r in records)
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_dataset(data: bytes) -> tuple[DatasetHeader, list[DatasetRecord]]:
    lines = data.decode("utf-8").splitlines()
    if not lines:
        raise ArtifactError("dataset file is empty")
    try:
        head = json.loads(lines[0])
        if head.get("magic") != DATASET_MAGIC:
            raise ArtifactError(f"not a dataset file (magic {head.get('magic')!r})")
        if head.get("version") != DATASET_VERSION:
            raise ArtifactError(f"unsupported dataset version {head.get('version')}")
        header = DatasetHeader(
            config=head["config"],
            counts={s: int(head["counts"][s]) for s in SPLITS},
            seed=int(head["seed"]),
            excluded=int(head.get("excluded", 0)),
            failed_scenes=int(head.get("failed_scenes", 0)),
        )
        records = [DatasetRecord.from_dict(json.loads(line)) for line in lines[1:]]
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"malformed dataset file: {e}") from e
    if len(records) != header.total or split_counts(records) != header.counts:
        raise ArtifactError(f"header announces {header.total} records, file holds {len(records)}")
    return header, records


def save_dataset(path: str | Path, header: DatasetHeader, records: list[DatasetRecord]) -> str:
    """Write the dataset and return its sha256."""
    data = encode_dataset(header, records)
    atomic_write(path, data)
    logger.info("wrote %d records to %s", len(records), path)
    return sha256_bytes(data)


def load_dataset(path: str | Path) -> tuple[DatasetHeader, list[DatasetRecord]]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise ArtifactError(f"dataset {path} does not exist") from e
    return decode_dataset(data)


# ------------------------------------------------------------------ models


@dataclass
class ModelArtifact:
    kind: str
    params: PredictorParams
    meta: dict = field(default_factory=dict)
    index: NeighborIndex | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ArtifactError(f"unknown model kind {self.kind!r}")
        if (self.kind == "nn") != (self.index is not None):
            raise ArtifactError("a neighbour index is stored with, and only with, kind 'nn'")


def _little_endian(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def encode_model(artifact: ModelArtifact) -> bytes:
    tensors = dict(artifact.params.tensors)
    if artifact.index is not None:
        tensors["index.embeddings"] = artifact.index.embeddings
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = _little_endian(np.asarray(arr))
        blob = raw.tobytes()
        entries.append(
            {"name": name, "shape": list(raw.shape), "dtype": raw.dtype.str, "offset": offset, "nbytes": len(blob)}
        )
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "kind": artifact.kind,
        "model_config": artifact.params.config.to_dict(),
        "param_version": artifact.params.version,
        "tensors": entries,
        "meta": artifact.meta,
        "index_labels": None if artifact.index is None else [s.to_list() for s in artifact.index.labels],
    }
    head = canonical_json(manifest).encode("utf-8")
    return _MODEL_PREFIX.pack(MODEL_MAGIC, MODEL_VERSION, len(head)) + head + b"".join(chunks)


def decode_model(data: bytes) -> ModelArtifact:
    if len(data) < _MODEL_PREFIX.size:
        raise ArtifactError("model file is truncated")
    magic, version, head_len = _MODEL_PREFIX.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ArtifactError(f"not a model file (magic {magic!r})")
    if version != MODEL_VERSION:
        raise ArtifactError(f"unsupported model version {version}")
    start = _MODEL_PREFIX.size + head_len
    try:
        manifest = json.loads(data[_MODEL_PREFIX.size:start].decode("utf-8"))
        payload = data[start:]
        expected = sum(e["nbytes"] for e in manifest["tensors"])
        if len(payload) != expected:
            raise ArtifactError(f"payload holds {len(payload)} bytes, manifest announces {expected}")
        tensors = {}
        for e in manifest["tensors"]:
            chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        config = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ArtifactError):
            raise
        raise ArtifactError(f"malformed model manifest: {e}") from e

    index = None
    embeddings = tensors.pop("index.embeddings", None)
    if manifest["kind"] == "nn":
        labels = tuple(VelocitySequence(tuple(t)) for t in manifest["index_labels"])
        index = NeighborIndex(embeddings=embeddings, labels=labels)
    params = PredictorParams(config, tensors, version=int(manifest["param_version"]))
    return ModelArtifact(kind=manifest["kind"], params=params, meta=manifest["meta"], index=index)


def save_model(path: str | Path, artifact: ModelArtifact) -> str:
    data = encode_model(artifact)
    atomic_write(path, data)
    logger.info("wrote %s model (%d bytes) to %s", artifact.kind, len(data), path)
    return sha256_bytes(data)


def load_model(path: str | Path) -> ModelArtifact:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise ArtifactError(f"model {path} does not exist") from e
    return decode_model(data)


# ----------------------------------------------------------------- reports


def encode_report(report: EvalReport, provenance: dict) -> bytes:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "report": report.to_dict(), "provenance": provenance}
    return (json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def save_report(path: str | Path, report: EvalReport, provenance: dict) -> str:
    data = encode_report(report, provenance)
    atomic_write(path, data)
    return sha256_bytes(data)


def load_report(path: str | Path) -> tuple[EvalReport, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ArtifactError(f"report {path} does not exist") from e
    except json.JSONDecodeError as e:
        raise ArtifactError(f"report {path} is not JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ArtifactError(f"report {path} has an unsupported schema")
    try:
        return EvalReport.from_dict(doc["report"]), doc.get("provenance", {})
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"malformed report {path}: {e}") from e


def save_json(path: str | Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8"))
