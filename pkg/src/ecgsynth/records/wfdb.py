"""Bit-exact WFDB I/O for format-16 records.

Scope: one little-endian int16 .dat per record, physical units via
(adc - baseline) / gain. Checksums are written correctly but only warned
about on read. Class and source ride in ``#`` comment lines so that records
written here round-trip their labels; foreign headers without those comments
read back with ``label=None``.
"""

from __future__ import annotations

import re
import warnings
from pathlib import Path

import numpy as np

from ..errors import ParseError, RangeError, TruncatedData, UnsupportedFormat
from .types import EcgRecord, RhythmClass, Source

_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\((-?\d+)\))?(?:/(\S*))?$")

CLASS_COMMENT = "# class:"
SOURCE_COMMENT = "# source:"


def _signed16_checksum(values: np.ndarray) -> int:
    return int(np.asarray(values, dtype=np.int64).sum() & 0xFFFF)


def read_wfdb(header_path) -> EcgRecord:
    """Parse a .hea/.dat pair into physical millivolt values."""
    header_path = Path(header_path)
    if not header_path.exists():
        raise ParseError(f"header not found: {header_path}")
    lines = header_path.read_text().splitlines()

    record_line = None
    record_line_no = 0
    comments: dict[str, str] = {}
    signal_specs: list[tuple[int, list[str]]] = []
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for key, tag in (("class", CLASS_COMMENT), ("source", SOURCE_COMMENT)):
                if line.lower().startswith(tag):
                    comments[key] = line[len(tag):].strip()
            continue
        if record_line is None:
            record_line = line
            record_line_no = no
        else:
            signal_specs.append((no, line.split()))

    if record_line is None:
        raise ParseError("header has no record line")
    fields = record_line.split()
    if len(fields) < 4:
        raise ParseError(
            f"record line needs 'name nsig fs nsamples', got {record_line!r}",
            line_no=record_line_no)
    try:
        nsig = int(fields[1])
        fs = float(fields[2])
        nsamples = int(fields[3])
    except ValueError as exc:
        raise ParseError(f"bad record line field: {exc}", line_no=record_line_no) from None
    if nsig < 1 or nsamples < 1 or fs <= 0:
        raise ParseError(
            f"invalid record geometry nsig={nsig} fs={fs} nsamples={nsamples}",
            line_no=record_line_no)
    if len(signal_specs) < nsig:
        raise ParseError(f"expected {nsig} signal lines, found {len(signal_specs)}")

    dat_names = []
    gains = np.empty(nsig)
    baselines = np.zeros(nsig)
    checksums: list[int | None] = []
    for i in range(nsig):
        no, tok = signal_specs[i]
        if len(tok) < 2:
            raise ParseError(f"signal line needs at least 'file fmt', got {tok}", line_no=no)
        dat_names.append(tok[0])
        fmt = tok[1].split("x")[0].split(":")[0]  # strip samples-per-frame / skew
        if fmt != "16":
            raise UnsupportedFormat(f"signal format {tok[1]!r} unsupported (only 16)")
        gain, baseline, units = 200.0, None, "mV"
        if len(tok) >= 3:
            m = _GAIN_RE.match(tok[2])
            if m is None:
                raise ParseError(f"cannot parse gain field {tok[2]!r}", line_no=no)
            gain = float(m.group(1))
            if m.group(2) is not None:
                baseline = int(m.group(2))
            if m.group(3):
                units = m.group(3)
        if gain == 0.0:
            gain = 200.0  # WFDB convention: 0 means default
        if units not in ("mV", ""):
            warnings.warn(f"{header_path.name} signal {i}: units {units!r}, assuming mV")
        if baseline is None:
            # adc zero (field 5) doubles as baseline when no parenthesis given
            baseline = int(tok[4]) if len(tok) >= 5 else 0
        gains[i] = gain
        baselines[i] = baseline
        checksums.append(int(tok[6]) if len(tok) >= 7 else None)

    if len(set(dat_names)) != 1:
        raise UnsupportedFormat(f"multi-.dat records unsupported: {sorted(set(dat_names))}")
    dat_path = header_path.parent / dat_names[0]
    if not dat_path.exists():
        raise ParseError(f"referenced .dat not found: {dat_path}")
    raw = np.frombuffer(dat_path.read_bytes(), dtype="<i2")
    needed = nsig * nsamples
    if raw.size < needed:
        raise TruncatedData(
            f"{dat_path.name}: {raw.size} samples on disk, header declares {needed}")
    adc = raw[:needed].reshape(nsamples, nsig).T.astype(np.float64)

    for i in range(nsig):
        if checksums[i] is not None and _signed16_checksum(adc[i]) != checksums[i] % 0x10000:
            warnings.warn(f"{header_path.name} signal {i}: checksum mismatch")

    physical = (adc - baselines[:, None]) / gains[:, None]

    label = None
    if "class" in comments:
        label = RhythmClass.from_code(comments["class"])
    source = Source.FIXTURE  # overridden by manifest rows during ingest
    if "source" in comments:
        try:
            source = Source(comments["source"])
        except ValueError:
            raise ParseError(f"unknown source tag {comments['source']!r}") from None
    return EcgRecord(signal=physical, fs=fs, label=label,
                     record_id=fields[0], source=source)


def write_wfdb(record: EcgRecord, gain: float, out_dir) -> tuple[Path, Path]:
    """Quantize to int16 at ``gain`` counts/mV and write a .hea/.dat pair."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scaled = record.signal * gain
    peak = np.max(np.abs(scaled)) if scaled.size else 0.0
    if peak > 32767:
        raise RangeError(
            f"record {record.record_id}: |value*gain| up to {peak:.0f} exceeds int16 range")
    adc = np.rint(scaled).astype(np.int16)

    name = record.record_id
    hea_path = out_dir / f"{name}.hea"
    dat_path = out_dir / f"{name}.dat"
    dat_path.write_bytes(adc.T.reshape(-1).astype("<i2").tobytes())

    fs_txt = f"{record.fs:g}"
    gain_txt = f"{gain:g}"
    lines = [f"{name} {record.leads} {fs_txt} {record.samples}"]
    for i in range(record.leads):
        init = int(adc[i, 0])
        csum = _signed16_checksum(adc[i])
        lines.append(
            f"{dat_path.name} 16 {gain_txt}(0)/mV 16 0 {init} {csum} 0 lead{i}")
    if record.label is not None:
        lines.append(f"{CLASS_COMMENT} {record.label.code}")
    lines.append(f"{SOURCE_COMMENT} {record.source.value}")
    hea_path.write_text("\n".join(lines) + "\n")
    return hea_path, dat_path


def quantized(record: EcgRecord, gain: float) -> np.ndarray:
    """The physical values a write/read round trip reproduces exactly."""
    return np.rint(record.signal * gain) / gain
