"""
Great Expectations validation module for generated force-effect datasets.

This module provides the data quality gate that runs before a dataset
file is written, and by run_checkpoint.py on existing files.
"""

from .validate_dataset import DatasetValidationError, validate_dataset_records

__all__ = ["DatasetValidationError", "validate_dataset_records"]
