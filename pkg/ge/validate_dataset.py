"""
Great Expectations gate for generated force-effect datasets.

Records are flattened to one row per (scene, body, force) and checked before
a dataset file is written, so a bad generator run never reaches training:
- required fields exist and are not null
- forces are horizontal and inside the magnitude bands
- labels are 1 to 6 tokens long
- split, category and band values come from their vocabularies
- impact points fall inside the image
- no scene appears in more than one split

Uses Great Expectations 1.x Fluent API.
"""

import logging

import great_expectations as gx
import pandas as pd

from pipeline.storage import SPLITS, DatasetRecord
from simulation.quantize import MAX_STEPS
from simulation.scene import CATEGORIES, BandConfig, MagnitudeBand

logger = logging.getLogger(__name__)

SUITE_NAME = "forcesim_dataset_suite"


class DatasetValidationError(ValueError):
    """The dataset gate rejected a batch of records."""

    def __init__(self, message: str, failed: list[str] | None = None):
        super().__init__(message)
        self.failed = failed or []


def records_to_frame(records: list[DatasetRecord]) -> pd.DataFrame:
    """One flat row per record."""
    rows = []
    for r in records:
        f = r.force
        rows.append(
            {
                "scene_seed": r.scene_seed,
                "body_id": r.body_id,
                "category": r.category,
                "split": r.split,
                "label": " ".join(str(t) for t in r.label.tokens),
                "label_length": len(r.label),
                "force_x": f.force.x,
                "force_y": f.force.y,
                "force_z": f.force.z,
                "magnitude": f.magnitude,
                "band": f.magnitude_band.value,
                "impact_u": f.impact_point_2d[0],
                "impact_v": f.impact_point_2d[1],
                "image_width": r.scene.camera.image_width,
                "image_height": r.scene.camera.image_height,
            }
        )
    return pd.DataFrame(rows)


def _build_suite(context, width: int, height: int, bands: BandConfig):
    suite = context.suites.add(gx.ExpectationSuite(name=SUITE_NAME))
    for column in ("scene_seed", "body_id", "category", "split", "label"):
        suite.add_expectation(gx.expectations.ExpectColumnValuesToNotBeNull(column=column))

    lo = min(bands.range(b)[0] for b in MagnitudeBand)
    hi = max(bands.range(b)[1] for b in MagnitudeBand)
    suite.add_expectation(gx.expectations.ExpectColumnValuesToBeBetween(column="force_z", min_value=0.0, max_value=0.0))
    suite.add_expectation(gx.expectations.ExpectColumnValuesToBeBetween(column="magnitude", min_value=lo, max_value=hi))
    suite.add_expectation(
        gx.expectations.ExpectColumnValuesToBeBetween(column="label_length", min_value=1, max_value=MAX_STEPS)
    )
    suite.add_expectation(gx.expectations.ExpectColumnValuesToBeInSet(column="split", value_set=list(SPLITS)))
    suite.add_expectation(gx.expectations.ExpectColumnValuesToBeInSet(column="category", value_set=list(CATEGORIES)))
    suite.add_expectation(
        gx.expectations.ExpectColumnValuesToBeInSet(column="band", value_set=[b.value for b in MagnitudeBand])
    )
    suite.add_expectation(
        gx.expectations.ExpectColumnValuesToBeBetween(column="impact_u", min_value=0.0, max_value=width - 1)
    )
    suite.add_expectation(
        gx.expectations.ExpectColumnValuesToBeBetween(column="impact_v", min_value=0.0, max_value=height - 1)
    )
    return suite


def split_leaks(df: pd.DataFrame) -> list[int]:
    """Scene seeds whose records span more than one split."""
    per_scene = df.groupby("scene_seed")["split"].nunique()
    return sorted(int(s) for s in per_scene[per_scene > 1].index)


def validate_dataset_records(records: list[DatasetRecord], bands: BandConfig | None = None):
    """
    Run the expectation suite over the records.

    Returns:
        GX validation results

    Raises:
        DatasetValidationError: if any expectation fails or a scene spans splits
    """
    if not records:
        raise DatasetValidationError("no records to validate")
    bands = bands or BandConfig()
    df = records_to_frame(records)
    logger.info("validating %d records (%d scenes)", len(df), df["scene_seed"].nunique())

    context = gx.get_context(mode="ephemeral")
    datasource = context.data_sources.add_pandas("forcesim_datasource")
    data_asset = datasource.add_dataframe_asset(name="force_records")
    batch_definition = data_asset.add_batch_definition_whole_dataframe("records_batch")
    width = int(df["image_width"].min())
    height = int(df["image_height"].min())
    suite = _build_suite(context, width, height, bands)

    validation_definition = context.validation_definitions.add(
        gx.ValidationDefinition(data=batch_definition, suite=suite, name="dataset_validation")
    )
    results = validation_definition.run(batch_parameters={"dataframe": df})
    _log_validation_results(results)

    failed = [
        f"{r.expectation_config.type}({r.expectation_config.kwargs.get('column', 'N/A')})"
        for r in results.results
        if not r.success
    ]
    leaks = split_leaks(df)
    if leaks:
        failed.append(f"split_hygiene(scene_seed in {leaks[:5]})")
    if failed:
        raise DatasetValidationError(
            f"Data validation failed! {len(failed)} checks failed: {', '.join(failed)}", failed=failed
        )
    return results


def _log_validation_results(results) -> None:
    total = len(results.results)
    passed = sum(1 for r in results.results if r.success)
    logger.info("expectations: %d of %d passed", passed, total)
    for result in results.results:
        if not result.success:
            logger.error(
                "failed %s on column %s: %s",
                result.expectation_config.type,
                result.expectation_config.kwargs.get("column", "N/A"),
                result.result,
            )
