"""
forcesim command line: gen, train, eval, predict, simulate, plot, holdout.

Usage:
    python -m pipeline.cli gen --scenes 200 --forces-per-body 2 --seed 0 --out data.fsd
    python -m pipeline.cli train --data data.fsd --arch small --iters 2000 --out model.fsm
    python -m pipeline.cli eval --model model.fsm --data data.fsd --out report.json
    python -m pipeline.cli plot --report report.json --out curves

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric abort.
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ge.validate_dataset import validate_dataset_records
from learning.baselines import (
    REGRESSION_STOP_SPEED,
    build_index,
    majority_sequence,
    nn_predict,
    predict_regression,
    regression_forward,
    nearest,
    train_regression,
)
from learning.encode import EncodedSample, EncodeOptions, encode_sample
from learning.evaluate import evaluate, holdout_split
from learning.net import decode_greedy, embed, forward, preset
from learning.train import TrainConfig, TrainingDivergedError, smoothed, train
from pipeline.plots import plot_report
from pipeline.storage import (
    DatasetHeader,
    DatasetRecord,
    ModelArtifact,
    load_dataset,
    load_model,
    load_report,
    save_dataset,
    save_json,
    save_model,
    save_report,
    sha256_file,
    split_counts,
)
from simulation.physics import SimConfig, simulate
from simulation.quantize import (
    ExtractionError,
    build_vocabulary,
    extract_sequence,
    quantize_velocity,
    sample_steps,
    token_name,
)
from simulation.scene import (
    MOVABLE_CATEGORIES,
    BandConfig,
    GenerationError,
    MagnitudeBand,
    SamplingError,
    SceneGenConfig,
    generate_scene,
    sample_force,
)
from simulation.settings import configure_logging, env_int

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

HOLDOUT_SCHEMA_VERSION = 1


class UsageError(Exception):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {value}")
    return value


def _band_list(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    valid = {b.value for b in MagnitudeBand}
    unknown = [n for n in names if n not in valid]
    if not names or unknown:
        raise argparse.ArgumentTypeError(f"bands must be a comma list of {sorted(valid)}")
    return tuple(dict.fromkeys(names))


def _workers(args) -> int:
    return args.workers if args.workers else max(1, env_int("WORKERS", 1))


def _run_ordered(fn, items: list, workers: int, initializer=None, initargs=()) -> list:
    """map() over items, in a process pool when workers > 1; results keep input order."""
    if workers <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))


# --------------------------------------------------------------------- gen


@dataclass(frozen=True)
class GenTask:
    index: int
    seed: int
    forces_per_body: int
    bands: tuple[str, ...]
    p_band: float
    val_fraction: float
    test_fraction: float
    scene_config: SceneGenConfig
    sim_config: SimConfig
    band_config: BandConfig


@dataclass
class GenResult:
    index: int
    records: list[DatasetRecord] = field(default_factory=list)
    excluded: int = 0
    unsampled: int = 0
    error: str | None = None


def _assign_split(rng: np.random.Generator, val_fraction: float, test_fraction: float) -> str:
    u = rng.random()
    if u < test_fraction:
        return "test"
    if u < test_fraction + val_fraction:
        return "val"
    return "train"


def generate_scene_records(task: GenTask) -> GenResult:
    """Scene, forces, simulations and labels for one scene index; seeded by (seed, index) alone."""
    result = GenResult(index=task.index)
    scene_seed, split_seed, force_seed = (int(s) for s in np.random.SeedSequence([task.seed, task.index]).generate_state(3))
    try:
        scene = generate_scene(scene_seed, task.scene_config)
    except GenerationError as e:
        result.error = str(e)
        return result

    split = _assign_split(np.random.default_rng(split_seed), task.val_fraction, task.test_fraction)
    rng = np.random.default_rng(force_seed)
    vocab = build_vocabulary()
    for body in scene.bodies:
        if body.is_static:
            continue
        previous = None
        for _ in range(task.forces_per_body):
            repeat = previous is not None and len(task.bands) > 1 and rng.random() < task.p_band
            if repeat:
                others = [b for b in task.bands if b != previous.magnitude_band.value]
                band, azimuth = others[int(rng.integers(len(others)))], previous.azimuth
            else:
                band, azimuth = task.bands[int(rng.integers(len(task.bands)))], None
            try:
                force = sample_force(
                    scene, body.id, int(rng.integers(2**32)), task.band_config, band=MagnitudeBand(band), azimuth=azimuth
                )
            except SamplingError as e:
                logger.debug("scene %d body %d: %s", task.index, body.id, e)
                result.unsampled += 1
                continue
            trace = simulate(scene, force, task.sim_config)
            try:
                label = extract_sequence(trace, vocab, task.sim_config)
            except ExtractionError:
                result.excluded += 1
                continue
            result.records.append(DatasetRecord(scene=scene, force=force, label=label, split=split))
            previous = force
    return result


def cmd_gen(args) -> int:
    print("=" * 60)
    print(f"Generating {args.scenes} scenes (seed={args.seed}, {args.forces_per_body} forces per body)")
    print("=" * 60)

    scene_config = SceneGenConfig.from_env()
    sim_config = SimConfig.from_env()
    band_config = BandConfig()
    if args.val_fraction + args.test_fraction > 1.0:
        raise UsageError("--val-fraction plus --test-fraction exceeds 1")
    tasks = [
        GenTask(
            index=i,
            seed=args.seed,
            forces_per_body=args.forces_per_body,
            bands=args.bands,
            p_band=args.p_band,
            val_fraction=args.val_fraction,
            test_fraction=args.test_fraction,
            scene_config=scene_config,
            sim_config=sim_config,
            band_config=band_config,
        )
        for i in range(args.scenes)
    ]
    results = _run_ordered(generate_scene_records, tasks, _workers(args))

    records: list[DatasetRecord] = []
    failed = excluded = unsampled = 0
    for res in results:
        if res.error is not None:
            failed += 1
            print(f"  ✗ scene {res.index}: {res.error}")
            continue
        records.extend(res.records)
        excluded += res.excluded
        unsampled += res.unsampled
    print(f"Kept {len(records)} samples; {excluded} non-converged excluded, {unsampled} unsampleable, {failed} scenes failed")
    if not records:
        raise ValueError("every sample was excluded; nothing to write")

    validate_dataset_records(records, band_config)
    print("  ✓ dataset passed validation")

    if args.holdout_ready:
        _check_holdout_coverage(records)

    config = {
        "scene": scene_config.to_dict(),
        "sim": sim_config.to_dict(),
        "bands": band_config.to_dict(),
        "allowed_bands": list(args.bands),
        "forces_per_body": args.forces_per_body,
        "p_band": args.p_band,
        "scenes": args.scenes,
        "val_fraction": args.val_fraction,
        "test_fraction": args.test_fraction,
    }
    header = DatasetHeader(
        config=config, counts=split_counts(records), seed=args.seed, excluded=excluded, failed_scenes=failed
    )
    digest = save_dataset(args.out, header, records)
    print(f"  ✓ wrote {args.out} {header.counts} sha256={digest[:12]}")
    return EXIT_OK


def _check_holdout_coverage(records: list[DatasetRecord]) -> None:
    table = pd.crosstab(pd.Series([r.category for r in records], name="category"), pd.Series([r.split for r in records], name="split"))
    print(table.to_string())
    missing = [c for c in MOVABLE_CATEGORIES if c not in table.index or table.loc[c].get("test", 0) == 0]
    if missing:
        raise ValueError(f"no test records for categories {missing}; generate more scenes for a holdout sweep")


# ------------------------------------------------------------------- train


def _band_config(header: DatasetHeader) -> BandConfig:
    bands = header.config.get("bands")
    return BandConfig(**{k: tuple(v) for k, v in bands.items()}) if bands else BandConfig()


def _encode_options(args, header: DatasetHeader) -> EncodeOptions:
    # --depth only switches the channel on; FORCESIM_DEPTH applies otherwise
    overrides = {"with_depth": True} if args.depth else {}
    return EncodeOptions.from_env(f_max=_band_config(header).f_max, **overrides)


def _encode_one(args: tuple[DatasetRecord, EncodeOptions]) -> EncodedSample:
    record, options = args
    sample = encode_sample(record.scene, record.force, record.label, options)
    sample.meta["category"] = record.category
    return sample


def encode_records(records: list[DatasetRecord], options: EncodeOptions, workers: int = 1) -> list[EncodedSample]:
    return _run_ordered(_encode_one, [(r, options) for r in records], workers)


def train_artifact(
    kind: str,
    samples: list[EncodedSample],
    args,
    header: DatasetHeader,
    options: EncodeOptions,
    extra_meta: dict | None = None,
) -> tuple[ModelArtifact, list[float]]:
    size = samples[0].rgbm.shape[1]
    model_config = preset(
        args.arch,
        image_size=size,
        with_depth=options.with_depth,
        head_rectifier=not args.linear_head,
        precision=args.precision,
    )
    overrides = dict(
        batch_size=args.batch, iterations=args.iters, seed=args.seed, lr_start=args.lr_start, lr_end=args.lr_end
    )
    if args.workers:
        overrides["workers"] = args.workers
    train_config = TrainConfig.from_env(**overrides)
    meta = {
        "train_config": train_config.to_dict(),
        "encode": options.to_dict(),
        "dataset_config_hash": header.config_hash,
        "train_samples": len(samples),
        **(extra_meta or {}),
    }

    if kind == "regression":
        params, history = train_regression(samples, model_config, train_config)
        return ModelArtifact(kind="regression", params=params, meta=meta), history

    result = train(samples, model_config, train_config)
    meta["class_weights"] = result.weights.to_dict()
    meta["clamped_probabilities"] = result.stats.clamped
    if kind == "nn":
        index = build_index(result.params, samples)
        return ModelArtifact(kind="nn", params=result.params, meta=meta, index=index), result.loss_history
    return ModelArtifact(kind="predictor", params=result.params, meta=meta), result.loss_history


def cmd_train(args) -> int:
    kind = args.baseline or "predictor"
    print("=" * 60)
    print(f"Training {kind} ({args.arch}) on {args.data}")
    print("=" * 60)

    header, records = load_dataset(args.data)
    train_records = [r for r in records if r.split == "train"]
    extra = {"dataset_sha256": sha256_file(args.data)}
    if args.exclude_category:
        train_records, _, removed = holdout_split(records, args.exclude_category)
        extra["exclude_category"] = args.exclude_category
        print(f"Removed {removed} '{args.exclude_category}' records from the training split")
    if not train_records:
        raise ValueError("training split is empty")

    options = _encode_options(args, header)
    samples = encode_records(train_records, options, _workers(args))
    print(f"Encoded {len(samples)} training samples ({options.channels} image channels)")

    artifact, history = train_artifact(kind, samples, args, header, options, extra)
    digest = save_model(args.out, artifact)
    window = min(100, len(history))
    save_json(
        Path(f"{args.out}.loss.json"),
        {"loss": history, "window": window, "smoothed": smoothed(history, window).tolist()},
    )
    print(f"  ✓ final loss {history[-1]:.4f}; wrote {args.out} sha256={digest[:12]}")
    return EXIT_OK


# -------------------------------------------------------------------- eval

_PREDICT_STATE: dict = {}


def _init_predictor(artifact: ModelArtifact, options: EncodeOptions) -> None:
    _PREDICT_STATE["artifact"] = artifact
    _PREDICT_STATE["options"] = options


def predict_sample(artifact: ModelArtifact, sample: EncodedSample):
    if artifact.kind == "regression":
        return predict_regression(artifact.params, sample)
    if artifact.kind == "nn":
        return nn_predict(artifact.index, artifact.params, sample)
    outputs, _ = forward(artifact.params, sample)
    return decode_greedy(outputs)


def _predict_one(record: DatasetRecord):
    artifact, options = _PREDICT_STATE["artifact"], _PREDICT_STATE["options"]
    return predict_sample(artifact, _encode_one((record, options)))


def _model_options(artifact: ModelArtifact) -> EncodeOptions:
    return EncodeOptions(**artifact.meta.get("encode", {}))


def evaluate_artifact(artifact: ModelArtifact, records: list[DatasetRecord], split: str, workers: int = 1):
    subset = [r for r in records if r.split == split]
    if not subset:
        raise ValueError(f"split {split!r} is empty")
    predictions = _run_ordered(
        _predict_one, subset, workers, initializer=_init_predictor, initargs=(artifact, _model_options(artifact))
    )
    train_labels = [r.label for r in records if r.split == "train"]
    majority = majority_sequence(train_labels) if train_labels else None
    return evaluate(
        predictions,
        [r.label for r in subset],
        [{"category": r.category} for r in subset],
        majority=majority,
    )


def cmd_eval(args) -> int:
    print("=" * 60)
    print(f"Evaluating {args.model} on split '{args.split}' of {args.data}")
    print("=" * 60)

    artifact = load_model(args.model)
    header, records = load_dataset(args.data)
    if artifact.meta.get("dataset_config_hash") != header.config_hash:
        logger.warning("model was trained on a dataset with a different configuration")
        print("  ✗ dataset configuration differs from the one the model was trained on (continuing)")

    report = evaluate_artifact(artifact, records, args.split, _workers(args))
    provenance = {
        "dataset_sha256": sha256_file(args.data),
        "model_sha256": sha256_file(args.model),
        "model_kind": artifact.kind,
        "command": ["eval", "--model", Path(args.model).name, "--data", Path(args.data).name, "--split", args.split],
        "seed": artifact.meta.get("train_config", {}).get("seed"),
    }
    save_report(args.out, report, provenance)
    print(f"  strict {report.strict_accuracy:.3f} | majority {report.majority_accuracy:.3f} | chance {report.chance_level:.4f}")
    print(f"  ✓ wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------- predict/simulate


def _record_at(records: list[DatasetRecord], index: int) -> DatasetRecord:
    if not 0 <= index < len(records):
        raise ValueError(f"record index {index} out of range (dataset holds {len(records)})")
    return records[index]


def cmd_predict(args) -> int:
    artifact = load_model(args.model)
    _, records = load_dataset(args.data)
    record = _record_at(records, args.index)
    sample = _encode_one((record, _model_options(artifact)))

    print(f"record {args.index}: scene {record.scene_seed} body {record.body_id} ({record.category})")
    if artifact.kind == "predictor":
        outputs, _ = forward(artifact.params, sample)
        for t, dist in enumerate(outputs):
            top = np.argsort(-dist, kind="stable")[:3]
            ranked = ", ".join(f"{token_name(int(c))}={dist[c]:.3f}" for c in top)
            print(f"  step {t}: {ranked}")
        predicted = decode_greedy(outputs)
    elif artifact.kind == "regression":
        vectors = regression_forward(artifact.params, sample).reshape(-1, 3)
        for t, v in enumerate(vectors):
            print(f"  step {t}: ({v[0]:+.3f}, {v[1]:+.3f}, {v[2]:+.3f}) |v|={np.linalg.norm(v):.3f}")
        predicted = predict_regression(artifact.params, sample, stop_speed=REGRESSION_STOP_SPEED)
    else:
        row = nearest(artifact.index, embed(artifact.params, sample))
        print(f"  nearest training embedding: row {row}")
        predicted = artifact.index.labels[row]
    print(f"predicted:    {predicted} {predicted.to_list()}")
    print(f"ground truth: {record.label} {record.label.to_list()}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    header, records = load_dataset(args.data)
    record = _record_at(records, args.index)
    cfg = SimConfig(**header.config["sim"]) if "sim" in header.config else SimConfig()
    vocab = build_vocabulary()
    trace = simulate(record.scene, record.force, cfg)

    print(f"record {args.index}: scene {record.scene_seed} body {record.body_id} ({record.category})")
    print(f"force {tuple(round(c, 3) for c in record.force.force)} band={record.force.magnitude_band.value}")
    print(f"stable at macro-step {trace.stable_step} (converged={trace.converged})")
    last = len(trace.states) - 1
    for k in sample_steps(cfg):
        v = trace.states[min(k, last)].velocity
        token = quantize_velocity(v, vocab, cfg.stop_speed)
        print(f"  step {k:2d}: v=({v.x:+.3f}, {v.y:+.3f}, {v.z:+.3f}) -> {token_name(token)}")

    label = extract_sequence(trace, vocab, cfg)
    if label != record.label:
        print(f"✗ re-simulated label {label.to_list()} differs from stored {record.label.to_list()}")
        return EXIT_DATA
    print(f"✓ label {label} {label.to_list()} matches the stored record")
    return EXIT_OK


# -------------------------------------------------------------------- plot


def cmd_plot(args) -> int:
    report, _ = load_report(args.report)
    relaxed_path, edit_path = plot_report(report, args.out)
    print(f"✓ wrote {relaxed_path} and {edit_path}")
    return EXIT_OK


# ----------------------------------------------------------------- holdout


def cmd_holdout(args) -> int:
    print("=" * 60)
    print(f"Holdout sweep on {args.data} ({args.arch}, {args.iters} iterations per model)")
    print("=" * 60)

    header, records = load_dataset(args.data)
    options = _encode_options(args, header)
    workers = _workers(args)
    test = [r for r in records if r.split == "test"]
    if not test:
        raise ValueError("test split is empty")
    categories = args.categories or list(MOVABLE_CATEGORIES)

    def run(train_records: list[DatasetRecord]) -> dict:
        samples = encode_records(train_records, options, workers)
        artifact, _ = train_artifact("predictor", samples, args, header, options)
        # the majority baseline comes from the records this model was trained on
        report = evaluate_artifact(artifact, list(train_records) + test, "test", workers)
        row = {c: report.per_category.get(c) for c in categories}
        present = [v for v in row.values() if v is not None]
        row["Avg."] = float(np.mean(present)) if present else None
        row["All"] = report.strict_accuracy
        return row

    rows: dict[str, dict] = {}
    failed = 0
    full_train = [r for r in records if r.split == "train"]
    for category in categories:
        try:
            kept, _, removed = holdout_split(records, category)
            if not kept:
                raise ValueError("training split is empty after removal")
            rows[category] = run(kept)
            print(f"  ✓ {category}: removed {removed}, held-out accuracy {rows[category][category]}")
        except ValueError as e:
            failed += 1
            print(f"  ✗ {category}: {e}")
    if not full_train:
        raise ValueError("training split is empty")
    rows["none"] = run(full_train)

    table = pd.DataFrame.from_dict(rows, orient="index")
    print(table.to_string(float_format=lambda v: f"{v:.3f}"))
    save_json(args.out, {"schema_version": HOLDOUT_SCHEMA_VERSION, "rows": rows, "failed": failed})
    print(f"  ✓ wrote {args.out} ({failed} categories failed)")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=("tiny", "small"), default="small")
    p.add_argument("--iters", type=_positive_int, default=2000)
    p.add_argument("--batch", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-start", type=float, default=1e-2)
    p.add_argument("--lr-end", type=float, default=1e-4)
    p.add_argument("--depth", action="store_true", help="add the inverse-depth channel")
    p.add_argument("--linear-head", action="store_true", help="no rectifier before the softmax")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forcesim", description="Force-effect prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a dataset")
    p.add_argument("--scenes", type=_positive_int, required=True)
    p.add_argument("--forces-per-body", type=_positive_int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bands", type=_band_list, default=tuple(b.value for b in MagnitudeBand))
    p.add_argument("--p-band", type=_fraction, default=0.3, help="chance to repeat a direction with another band")
    p.add_argument("--val-fraction", type=_fraction, default=0.1)
    p.add_argument("--test-fraction", type=_fraction, default=0.3)
    p.add_argument("--holdout-ready", action="store_true", help="require test records for every movable category")
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the predictor or a baseline")
    _add_training_flags(p)
    p.add_argument("--baseline", choices=("regression", "nn"))
    p.add_argument("--exclude-category", choices=MOVABLE_CATEGORIES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="print the prediction for one record")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="re-run physics for one record")
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plot", help="SVG curves from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("holdout", help="retrain without each category and score on the full test split")
    _add_training_flags(p)
    p.add_argument("--categories", nargs="+", choices=MOVABLE_CATEGORIES)
    p.set_defaults(func=cmd_holdout)
    return parser


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as e:
        print(f"✗ Numeric abort at iteration {e.iteration} (lr={e.lr:.3e}, batch={e.batch_ids}): {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
