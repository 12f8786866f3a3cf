"""Dataset-level operations: anti-aliased resampling, merging, stratified
splitting/subsampling, and directory persistence (WFDB pairs + CSV manifest)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import ParseError, SchemaError, StratifyError, UnsupportedRatio
from .types import Dataset, EcgRecord, RhythmClass, Source, SplitSpec
from .wfdb import read_wfdb, write_wfdb

_FIR_TAPS = 63  # windowed-sinc anti-alias filter length


def _lowpass_kernel(cutoff: float) -> np.ndarray:
    """Blackman-windowed sinc, unit DC gain. ``cutoff`` in cycles/sample.

    Blackman rather than Hamming: at 63 taps the Hamming passband ripple
    (~2e-3) exceeds the 1e-3 in-band fidelity this module promises for the
    500<->100 Hz pair; Blackman holds it near 1e-4 at the same length.
    """
    m = _FIR_TAPS - 1
    n = np.arange(_FIR_TAPS) - m / 2
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * n)
    h *= np.blackman(_FIR_TAPS)
    return h / h.sum()


def _filter_reflect(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    half = len(kernel) // 2
    padded = np.pad(signal, [(0, 0), (half, half)], mode="reflect")
    out = np.empty_like(signal)
    for i in range(signal.shape[0]):
        out[i] = np.convolve(padded[i], kernel, mode="valid")
    return out


def resample(record: EcgRecord, target_fs: float) -> EcgRecord:
    """Integer-factor resampling with a 63-tap anti-alias low-pass."""
    if target_fs == record.fs:
        return EcgRecord(signal=record.signal.copy(), fs=record.fs, label=record.label,
                         record_id=record.record_id, source=record.source)
    if target_fs <= 0:
        raise UnsupportedRatio(f"target fs must be positive, got {target_fs}")
    down = record.fs / target_fs
    up = target_fs / record.fs
    if abs(down - round(down)) < 1e-9 and down > 1:
        factor = int(round(down))
        kernel = _lowpass_kernel(0.5 / factor)
        filtered = _filter_reflect(record.signal, kernel)
        out = filtered[:, ::factor]
    elif abs(up - round(up)) < 1e-9 and up > 1:
        factor = int(round(up))
        stuffed = np.zeros((record.leads, record.samples * factor))
        stuffed[:, ::factor] = record.signal
        kernel = _lowpass_kernel(0.5 / factor) * factor
        out = _filter_reflect(stuffed, kernel)
    else:
        raise UnsupportedRatio(
            f"{record.fs} -> {target_fs} Hz is not an integer up/down factor")
    return EcgRecord(signal=out, fs=target_fs, label=record.label,
                     record_id=record.record_id, source=record.source)


def resample_dataset(ds: Dataset, target_fs: float) -> Dataset:
    return Dataset(records=[resample(r, target_fs) for r in ds.records])


def harmonize_merge(a: Dataset, b: Dataset, target_fs: float) -> Dataset:
    """Resample both datasets to ``target_fs`` and concatenate them.

    Class counts add elementwise; per-record source tags are preserved.
    """
    if a.records and b.records and a.leads != b.leads:
        raise SchemaError(f"lead count mismatch: {a.leads} vs {b.leads}")
    merged = [resample(r, target_fs) for r in a.records]
    merged += [resample(r, target_fs) for r in b.records]
    return Dataset(records=merged)


def _allocate(n: int, fracs: tuple[float, ...]) -> list[int]:
    """Largest-remainder rounding: totals exact, each part within +-1 of n*frac."""
    quotas = [n * f for f in fracs]
    base = [int(np.floor(q)) for q in quotas]
    leftover = n - sum(base)
    remainders = sorted(range(len(fracs)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in remainders[:leftover]:
        base[i] += 1
    return base


def stratified_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic per-class partition into train/val/test."""
    rng = np.random.default_rng(spec.seed)
    parts: tuple[list, list, list] = ([], [], [])
    fracs = (spec.train_frac, spec.val_frac, spec.test_frac)
    for cls in sorted(ds.by_class(), key=int):
        recs = sorted(ds.by_class()[cls], key=lambda r: r.record_id)
        if len(recs) < 3:
            raise StratifyError(f"class {cls.code} has {len(recs)} records, need >= 3")
        order = rng.permutation(len(recs))
        counts = _allocate(len(recs), fracs)
        offset = 0
        for part, count in zip(parts, counts):
            part.extend(recs[i] for i in order[offset:offset + count])
            offset += count
    return tuple(Dataset(records=p) for p in parts)


def stratified_subsample(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Per-class random subset of round(fraction * n) records."""
    if not 0 < fraction <= 1:
        raise StratifyError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in sorted(ds.by_class(), key=int):
        recs = sorted(ds.by_class()[cls], key=lambda r: r.record_id)
        take = int(round(fraction * len(recs)))
        if take == 0:
            raise StratifyError(f"fraction {fraction} empties class {cls.code}")
        order = rng.permutation(len(recs))[:take]
        chosen.extend(recs[i] for i in order)
    return Dataset(records=chosen)


# -- persistence -----------------------------------------------------------

MANIFEST_NAME = "labels.csv"


def save_dataset(ds: Dataset, out_dir, gain: float = 1000.0) -> Path:
    """Write every record as a WFDB pair plus a labels.csv manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in ds.records:
        write_wfdb(rec, gain=gain, out_dir=out_dir)
        rows.append((rec.record_id, rec.label.code, rec.source.value))
    with open(out_dir / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "class_code", "source"])
        writer.writerows(rows)
    return out_dir


def load_manifest(path) -> list[tuple[str, RhythmClass, Source]]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"manifest not found: {path}")
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["record_id", "class_code", "source"]:
            raise ParseError(f"{path.name}: expected header record_id,class_code,source", line_no=1)
        for no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise ParseError(f"{path.name}: need 3 columns, got {row}", line_no=no)
            try:
                source = Source(row[2].strip())
            except ValueError:
                raise ParseError(f"{path.name}: unknown source {row[2]!r}", line_no=no) from None
            out.append((row[0].strip(), RhythmClass.from_code(row[1]), source))
    return out


def load_dataset(data_dir, manifest_path=None) -> Dataset:
    """Read the records a manifest names; manifest label/source win over
    whatever the headers carry."""
    data_dir = Path(data_dir)
    manifest_path = Path(manifest_path) if manifest_path else data_dir / MANIFEST_NAME
    records = []
    for record_id, label, source in load_manifest(manifest_path):
        rec = read_wfdb(data_dir / f"{record_id}.hea")
        rec.label = label
        rec.source = source
        rec.record_id = record_id
        records.append(rec)
    return Dataset(records=records)
