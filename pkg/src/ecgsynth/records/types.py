"""Core data types for labeled multichannel ECG records."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from ..errors import SchemaError, ShapeError


class RhythmClass(IntEnum):
    """Seven-class rhythm taxonomy shared by both source datasets.

    The id<->code bijection is fixed; do not reorder.
    """

    SBRAD = 0
    SR = 1
    AFIB = 2
    STACH = 3
    AFLT = 4
    SARRH = 5
    SVTAC = 6

    @property
    def code(self) -> str:
        return self.name

    @classmethod
    def from_code(cls, code: str) -> "RhythmClass":
        try:
            return cls[code.strip().upper()]
        except KeyError:
            raise SchemaError(f"unknown rhythm class code {code!r}") from None


class Source(str, Enum):
    PTBXL = "PTBXL"
    CHAPMAN = "CHAPMAN"
    MERGED = "MERGED"
    FIXTURE = "FIXTURE"
    SYNTHETIC = "SYNTHETIC"


@dataclass
class EcgRecord:
    """One multichannel signal in millivolts: (leads, samples) at ``fs`` Hz.

    ``label`` may be None only transiently (e.g. a WFDB record read before its
    manifest row is joined); datasets require labeled records.
    """

    signal: np.ndarray
    fs: float
    label: RhythmClass | None
    record_id: str
    source: Source

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if self.signal.ndim != 2:
            raise ShapeError(f"signal must be (leads, samples), got shape {self.signal.shape}")
        leads, samples = self.signal.shape
        if leads < 1 or samples < 1:
            raise ShapeError(f"need leads >= 1 and samples > 0, got {self.signal.shape}")
        if not np.all(np.isfinite(self.signal)):
            raise ShapeError(f"record {self.record_id}: non-finite sample values")
        if self.fs <= 0:
            raise ShapeError(f"record {self.record_id}: fs must be positive, got {self.fs}")

    @property
    def leads(self) -> int:
        return self.signal.shape[0]

    @property
    def samples(self) -> int:
        return self.signal.shape[1]

    @property
    def seconds(self) -> float:
        return self.samples / self.fs


@dataclass
class Dataset:
    """Immutable-by-convention collection of records sharing leads and fs."""

    records: list[EcgRecord]
    class_counts: dict[RhythmClass, int] = field(default_factory=dict)

    def __post_init__(self):
        counts: dict[RhythmClass, int] = {}
        for rec in self.records:
            if rec.label is None:
                raise SchemaError(f"record {rec.record_id} has no label")
            counts[rec.label] = counts.get(rec.label, 0) + 1
        if self.class_counts and self.class_counts != counts:
            raise SchemaError("class_counts inconsistent with records")
        self.class_counts = counts
        if self.records:
            leads, fs = self.records[0].leads, self.records[0].fs
            for rec in self.records:
                if rec.leads != leads:
                    raise SchemaError(
                        f"record {rec.record_id}: {rec.leads} leads, dataset has {leads}")
                if rec.fs != fs:
                    raise SchemaError(
                        f"record {rec.record_id}: fs {rec.fs}, dataset has {fs}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def leads(self) -> int | None:
        return self.records[0].leads if self.records else None

    @property
    def fs(self) -> float | None:
        return self.records[0].fs if self.records else None

    @property
    def samples(self) -> int | None:
        return self.records[0].samples if self.records else None

    def record_ids(self) -> set[str]:
        return {rec.record_id for rec in self.records}

    def by_class(self) -> dict[RhythmClass, list[EcgRecord]]:
        out: dict[RhythmClass, list[EcgRecord]] = {}
        for rec in self.records:
            out.setdefault(rec.label, []).append(rec)
        return out

    def signals_array(self, dtype=np.float32) -> np.ndarray:
        """(n, leads, samples) stack; records must share a common length."""
        lengths = {rec.samples for rec in self.records}
        if len(lengths) > 1:
            raise SchemaError(f"records have mixed lengths {sorted(lengths)}")
        return np.stack([rec.signal for rec in self.records]).astype(dtype)

    def labels_array(self) -> np.ndarray:
        return np.array([int(rec.label) for rec in self.records], dtype=np.int64)


@dataclass(frozen=True)
class SplitSpec:
    """Proportions for a stratified train/val/test split."""

    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise SchemaError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise SchemaError(f"split fractions must sum to 1, got {sum(fracs)}")
