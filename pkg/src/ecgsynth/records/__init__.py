"""Dataset ingestion, synthesis, harmonization and splitting."""

from .types import Dataset, EcgRecord, RhythmClass, Source, SplitSpec
from .wfdb import quantized, read_wfdb, write_wfdb
from .fixture import generate_fixture, generate_fixture_dataset
from .ops import (
    harmonize_merge,
    load_dataset,
    load_manifest,
    resample,
    resample_dataset,
    save_dataset,
    stratified_split,
    stratified_subsample,
)

__all__ = [
    "Dataset", "EcgRecord", "RhythmClass", "Source", "SplitSpec",
    "generate_fixture", "generate_fixture_dataset", "harmonize_merge",
    "load_dataset", "load_manifest", "quantized", "read_wfdb", "resample",
    "resample_dataset", "save_dataset", "stratified_split",
    "stratified_subsample", "write_wfdb",
]
