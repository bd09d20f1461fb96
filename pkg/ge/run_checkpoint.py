"""
Command-line script to run the dataset checkpoint on an existing file.

Usage:
    python ge/run_checkpoint.py PATH

Exit status is 0 when every expectation passes, 2 when the file is
unreadable or the gate rejects it.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from ge.validate_dataset import DatasetValidationError, validate_dataset_records  # noqa: E402
from pipeline.storage import ArtifactError, load_dataset  # noqa: E402
from simulation.scene import BandConfig  # noqa: E402
from simulation.settings import configure_logging  # noqa: E402


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print(__doc__)
        return 1
    path = argv[0]

    print("=" * 70)
    print("Great Expectations - force-effect dataset validation")
    print("=" * 70)
    configure_logging()

    try:
        header, records = load_dataset(path)
    except ArtifactError as e:
        print(f"✗ Cannot read {path}: {e}")
        return 2
    print(f"Loaded {len(records)} records ({header.counts}) from {path}")

    bands = header.config.get("bands")
    band_config = BandConfig(**{k: tuple(v) for k, v in bands.items()}) if bands else BandConfig()
    try:
        validate_dataset_records(records, band_config)
    except DatasetValidationError as e:
        print(f"\n✗ Validation failed: {e}")
        return 2

    print("\n✓ Validation passed!")
    return 0


if __name__ == "__main__":
    sys.exit(main())
