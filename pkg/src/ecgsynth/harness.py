"""Experimental protocol: the five-setting train/test matrix with repeat
averaging, and the layer-freezing transfer sweep."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .classifier import (
    CSV_HEADER,
    ClassifierConfig,
    MetricsReport,
    ResidualCnn,
    build_classifier,
    evaluate,
    metrics_csv_row,
    train_classifier,
)
from .errors import SchemaError, SourceError
from .nn import freeze_all_except_head
from .records import Dataset, stratified_subsample


class Setting(Enum):
    """Train-source/test-source combinations (R = real, S = synthetic)."""

    TrRTeR = ("real", "real")
    TrSTeS = ("synth", "synth")
    TrSTeR = ("synth", "real")
    TrRTeS = ("real", "synth")
    TrRSTeR = ("real+synth", "real")

    @property
    def train_source(self) -> str:
        return self.value[0]

    @property
    def test_source(self) -> str:
        return self.value[1]

    def needs_synth(self) -> bool:
        return "synth" in self.value[0] or "synth" in self.value[1]


@dataclass(frozen=True)
class RealSplits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class TransferPlan:
    fractions: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    n_repeats: int = 1
    lr_factor: float = 0.1

    def __post_init__(self):
        fr = tuple(self.fractions)
        if any(not 0 < f <= 1 for f in fr) or list(fr) != sorted(fr):
            raise SchemaError(f"fractions must be ascending in (0, 1], got {fr}")
        object.__setattr__(self, "fractions", fr)


def _check_disjoint(train: Dataset, test: Dataset, context: str) -> None:
    overlap = train.record_ids() & test.record_ids()
    if overlap:
        raise SchemaError(f"{context}: train/test share record ids {sorted(overlap)[:3]}")


def _split_synth(synth: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Internal train/val/test partition of a synthetic set: roughly
    0.8/0.1/0.1 but guaranteeing at least one record per class per part."""
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    for cls, recs in sorted(synth.by_class().items(), key=lambda kv: int(kv[0])):
        n = len(recs)
        if n < 3:
            raise SourceError(
                f"synthetic class {cls.code} has {n} records; need >= 3 per class")
        recs = sorted(recs, key=lambda r: r.record_id)
        order = rng.permutation(n)
        n_test = max(1, int(round(0.1 * n)))
        n_val = max(1, int(round(0.1 * n)))
        cuts = (n - n_val - n_test, n - n_test, n)
        lo = 0
        for part, hi in zip(parts, cuts):
            part.extend(recs[i] for i in order[lo:hi])
            lo = hi
    return tuple(Dataset(records=p) for p in parts)


def run_setting(setting: Setting, splits: RealSplits, synth: Dataset | None,
                cfg: ClassifierConfig, seed: int) -> MetricsReport:
    """Train a fresh classifier for one matrix cell and evaluate it.

    Wall time covers training plus evaluation. Synthetic data is split
    internally when a synthetic setting needs train/val/test partitions;
    TrRTeS tests on the full synthetic set (disjoint from real training by
    construction); TrRSTeR concatenates real train with every synthetic
    record.
    """
    if setting.needs_synth() and (synth is None or len(synth) == 0):
        raise SourceError(f"setting {setting.name} requires synthetic data")
    t0 = time.perf_counter()
    if setting is Setting.TrRTeR:
        train, val, test = splits.train, splits.val, splits.test
    elif setting is Setting.TrSTeS:
        train, val, test = _split_synth(synth, seed)
    elif setting is Setting.TrSTeR:
        train, val, _ = _split_synth(synth, seed)
        test = splits.test
    elif setting is Setting.TrRTeS:
        train, val, test = splits.train, splits.val, synth
    elif setting is Setting.TrRSTeR:
        train = Dataset(records=list(splits.train.records) + list(synth.records))
        val, test = splits.val, splits.test
    else:  # pragma: no cover
        raise SourceError(f"unhandled setting {setting}")
    _check_disjoint(train, test, setting.name)
    model = build_classifier(cfg, leads=train.leads, length=train.samples, seed=seed)
    model, _ = train_classifier(model, train, val, cfg, seed=seed)
    report = evaluate(model, test)
    report.wall_time_s = time.perf_counter() - t0
    return report


@dataclass
class EvalReport:
    """Per-cell metric rows plus repeat averages."""

    rows: list = field(default_factory=list)  # (generator, setting, repeat, MetricsReport)
    errors: list = field(default_factory=list)
    n_repeats: int = 0

    @property
    def partial(self) -> bool:
        return bool(self.errors)

    def add(self, generator: str, setting: Setting, repeat: int,
            report: MetricsReport) -> None:
        self.rows.append((generator, setting.name, repeat, report))

    def aggregates(self) -> dict[tuple[str, str], dict[str, float]]:
        groups: dict[tuple[str, str], list[MetricsReport]] = {}
        for gen, setting, _, rep in self.rows:
            groups.setdefault((gen, setting), []).append(rep)
        out = {}
        for key, reps in sorted(groups.items()):
            out[key] = {name: float(np.mean([r.values()[name] for r in reps]))
                        for name in ("accuracy", "precision", "recall", "f1",
                                     "roc_auc", "wall_time_s")}
            out[key]["n_repeats"] = len(reps)
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ordered = sorted(self.rows, key=lambda r: (r[0], r[1], r[2]))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for gen, setting, repeat, rep in ordered:
                writer.writerow(metrics_csv_row(rep, setting, gen, repeat))
        return path

    def write_aggregates_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generator", "setting", "n_repeats", "accuracy",
                             "precision", "recall", "f1", "roc_auc", "wall_time_s"])
            for (gen, setting), vals in self.aggregates().items():
                writer.writerow([gen, setting, vals["n_repeats"]] +
                                [f"{vals[k]:.6f}" for k in
                                 ("accuracy", "precision", "recall", "f1", "roc_auc")] +
                                [f"{vals['wall_time_s']:.3f}"])
        return path


def cell_seed(base_seed: int, source_idx: int, setting_idx: int, repeat: int) -> int:
    return base_seed + 9973 * (source_idx * 1000 + setting_idx * 100 + repeat)


def run_matrix(sources: dict, splits: RealSplits, cfg: ClassifierConfig,
               n_repeats: int = 3, base_seed: int = 0,
               progress=None) -> EvalReport:
    """Full cross product (sources + "all") x settings x repeats.

    ``sources`` maps generator name to a synthetic Dataset, or to a callable
    ``f(seed) -> Dataset`` when repeats should re-sample. The merged "all"
    source concatenates every generator's records. Cell failures are recorded
    and the run continues.
    """
    if not sources:
        raise SourceError("run_matrix needs at least one synthetic source")
    report = EvalReport(n_repeats=n_repeats)
    names = sorted(sources)
    fixed: dict[str, Dataset] = {}
    for name in names:
        src = sources[name]
        if isinstance(src, Dataset):
            if len(src) == 0:
                raise SourceError(f"synthetic source {name!r} is empty")
            fixed[name] = src
    all_names = names + ["all"]
    for s_idx, name in enumerate(all_names):
        for set_idx, setting in enumerate(Setting):
            for repeat in range(n_repeats):
                seed = cell_seed(base_seed, s_idx, set_idx, repeat)
                try:
                    synth = _resolve_source(name, names, sources, fixed, seed)
                    rep = run_setting(setting, splits, synth, cfg, seed)
                    report.add(name, setting, repeat, rep)
                except Exception as exc:  # cell isolation: record and continue
                    report.errors.append(f"{name}/{setting.name}/r{repeat}: {exc}")
                if progress:
                    progress(name, setting.name, repeat)
    return report


def _resolve_source(name: str, names: list, sources: dict, fixed: dict,
                    seed: int) -> Dataset:
    if name == "all":
        parts = [_resolve_source(n, names, sources, fixed, seed) for n in names]
        records = [r for ds in parts for r in ds.records]
        return Dataset(records=records)
    src = sources[name]
    if callable(src) and not isinstance(src, Dataset):
        return src(seed)
    return fixed[name]


def manifest_json(path, config_text: str, seeds: dict, checkpoints: dict,
                  wall_times: dict) -> Path:
    path = Path(path)
    payload = {
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seeds": seeds,
        "checkpoint_hashes": checkpoints,
        "wall_times_s": wall_times,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- transfer protocol -----------------------------------------------------


@dataclass
class TransferRow:
    fraction: float
    repeat: int
    fine_tune: MetricsReport
    baseline: MetricsReport


@dataclass
class TransferReport:
    rows: list = field(default_factory=list)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fraction", "repeat", "mode", "accuracy", "precision",
                             "recall", "f1", "roc_auc", "wall_time_s"])
            for row in self.rows:
                for mode, rep in (("fine_tune", row.fine_tune),
                                  ("baseline", row.baseline)):
                    vals = rep.values()
                    writer.writerow(
                        [f"{row.fraction:g}", row.repeat, mode] +
                        [f"{vals[k]:.6f}" for k in ("accuracy", "precision",
                                                    "recall", "f1", "roc_auc")] +
                        [f"{vals['wall_time_s']:.3f}"])
        return path


def clone_classifier(model: ResidualCnn, seed: int = 0) -> ResidualCnn:
    clone = build_classifier(model.cfg, model.leads, model.length, seed=seed)
    clone.load_state_arrays(model.state_arrays())
    return clone


def run_transfer(pretrained: ResidualCnn, splits: RealSplits, plan: TransferPlan,
                 cfg: ClassifierConfig, base_seed: int = 0) -> TransferReport:
    """Freeze everything but the dense head of a synthetic-data-pretrained
    classifier and fine-tune on growing fractions of real data, against a
    fresh-classifier baseline on the same fraction.

    Fine-tuning uses lr * plan.lr_factor and is NOT equivalent to TrRSTeR at
    fraction 1.0: the convolutional trunk stays frozen throughout.
    """
    report = TransferReport()
    for f_idx, fraction in enumerate(plan.fractions):
        for repeat in range(plan.n_repeats):
            seed = base_seed + 7919 * (f_idx * 100 + repeat)
            sub = stratified_subsample(splits.train, fraction, seed=seed)

            t0 = time.perf_counter()
            tuned = clone_classifier(pretrained, seed=seed)
            freeze_all_except_head(tuned, ResidualCnn.HEAD_LAYERS)
            tuned, _ = train_classifier(tuned, sub, splits.val, cfg, seed=seed,
                                        lr_override=cfg.lr * plan.lr_factor)
            fine_rep = evaluate(tuned, splits.test)
            fine_rep.wall_time_s = time.perf_counter() - t0

            t0 = time.perf_counter()
            fresh = build_classifier(cfg, splits.train.leads, splits.train.samples,
                                     seed=seed)
            fresh, _ = train_classifier(fresh, sub, splits.val, cfg, seed=seed)
            base_rep = evaluate(fresh, splits.test)
            base_rep.wall_time_s = time.perf_counter() - t0

            report.rows.append(TransferRow(fraction=fraction, repeat=repeat,
                                           fine_tune=fine_rep, baseline=base_rep))
    return report
