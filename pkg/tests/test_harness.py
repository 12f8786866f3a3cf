"""Protocol contracts: setting semantics, matrix counting/aggregation,
disjointness, determinism and the transfer sweep's freeze guarantees."""

import pytest

from ecgsynth import records as rs
from ecgsynth.classifier import ClassifierConfig, build_classifier, train_classifier
from ecgsynth.errors import SchemaError, SourceError
from ecgsynth.harness import (
    EvalReport,
    RealSplits,
    Setting,
    TransferPlan,
    clone_classifier,
    run_matrix,
    run_setting,
    run_transfer,
)
from ecgsynth.records import Dataset, EcgRecord, RhythmClass, Source, SplitSpec


CLASSES = (RhythmClass.SBRAD, RhythmClass.STACH, RhythmClass.SR)


def quick_cfg(**kw):
    base = dict(n_conv_blocks=1, n_kernels=4, kernel_len=7, n_neurons=16,
                n_dense_layers=1, lr=2e-3, dropout=0.0, patience=3, max_epochs=8,
                batch_size=16)
    base.update(kw)
    return ClassifierConfig(**base)


def make_splits(per_class=8, seconds=2, seed=0):
    ds = rs.generate_fixture_dataset(list(CLASSES), per_class, 100, seconds, 1,
                                     seed=seed)
    train, val, test = rs.stratified_split(ds, SplitSpec(0.6, 0.2, 0.2, seed=seed))
    return RealSplits(train=train, val=val, test=test)


def make_synth(per_class=10, seconds=2, seed=99, tag="synA"):
    ds = rs.generate_fixture_dataset(list(CLASSES), per_class, 100, seconds,
                                     1, seed=seed)
    records = []
    for i, rec in enumerate(ds.records):
        records.append(EcgRecord(signal=rec.signal, fs=rec.fs, label=rec.label,
                                 record_id=f"syn-{tag}-{i}", source=Source.SYNTHETIC))
    return Dataset(records=records)


class TestSettingBasics:
    def test_source_mapping_fixed(self):
        assert Setting.TrRTeR.value == ("real", "real")
        assert Setting.TrSTeS.value == ("synth", "synth")
        assert Setting.TrSTeR.value == ("synth", "real")
        assert Setting.TrRTeS.value == ("real", "synth")
        assert Setting.TrRSTeR.value == ("real+synth", "real")

    def test_missing_synth_raises_source_error(self):
        splits = make_splits()
        with pytest.raises(SourceError):
            run_setting(Setting.TrSTeR, splits, None, quick_cfg(), seed=0)

    def test_trrter_is_plain_train_eval(self):
        splits = make_splits()
        cfg = quick_cfg()
        rep = run_setting(Setting.TrRTeR, splits, None, cfg, seed=1)
        # plumbing identity: same metrics as calling the classifier directly
        from ecgsynth.classifier import evaluate
        model = build_classifier(cfg, splits.train.leads, splits.train.samples, seed=1)
        model, _ = train_classifier(model, splits.train, splits.val, cfg, seed=1)
        direct = evaluate(model, splits.test)
        assert rep.accuracy == direct.accuracy
        assert rep.f1_macro == direct.f1_macro

    def test_trrster_train_size_is_sum(self):
        splits = make_splits()
        synth = make_synth()
        combined = Dataset(records=list(splits.train.records) + list(synth.records))
        assert len(combined) == len(splits.train) + len(synth)
        rep = run_setting(Setting.TrRSTeR, splits, synth, quick_cfg(), seed=0)
        assert 0.0 <= rep.accuracy <= 1.0

    def test_disjointness_guard_trips_on_id_collision(self):
        splits = make_splits()
        # synthetic records maliciously reuse real test ids
        bad = Dataset(records=[
            EcgRecord(signal=r.signal, fs=r.fs, label=r.label,
                      record_id=r.record_id, source=Source.SYNTHETIC)
            for r in splits.test.records])
        with pytest.raises(SchemaError):
            run_setting(Setting.TrRSTeR, splits, bad, quick_cfg(), seed=0)

    def test_all_settings_disjoint_train_test(self):
        splits = make_splits()
        synth = make_synth()
        for setting in Setting:
            rep = run_setting(setting, splits, synth, quick_cfg(), seed=2)
            assert 0.0 <= rep.accuracy <= 1.0  # disjointness asserted inside


class TestMatrix:
    def test_row_counting_one_generator(self):
        splits = make_splits()
        report = run_matrix({"genA": make_synth()}, splits, quick_cfg(),
                            n_repeats=2, base_seed=0)
        # (genA + all) x 5 settings x 2 repeats
        assert len(report.rows) == 2 * 5 * 2
        assert not report.partial

    def test_aggregate_mean(self):
        report = EvalReport()
        from ecgsynth.classifier import MetricsReport
        report.add("g", Setting.TrRTeR, 0,
                   MetricsReport(0.4, 0.4, 0.4, 0.4, 0.4))
        report.add("g", Setting.TrRTeR, 1,
                   MetricsReport(0.6, 0.6, 0.6, 0.6, 0.6))
        agg = report.aggregates()[("g", "TrRTeR")]
        assert agg["accuracy"] == pytest.approx(0.5)
        assert agg["n_repeats"] == 2

    def test_all_source_class_counts_sum(self):
        a = make_synth(per_class=3, tag="a", seed=1)
        b = make_synth(per_class=5, tag="b", seed=2)
        from ecgsynth.harness import _resolve_source
        merged = _resolve_source("all", ["a", "b"], {"a": a, "b": b},
                                 {"a": a, "b": b}, seed=0)
        for cls in CLASSES:
            assert merged.class_counts[cls] == 8

    def test_cell_failure_recorded_run_continues(self):
        splits = make_splits()
        bad = Dataset(records=[])  # empty synthetic source trips every synth cell

        def broken(seed):
            raise RuntimeError("generator exploded")

        report = run_matrix({"ok": make_synth(), "bad": broken}, splits,
                            quick_cfg(), n_repeats=1, base_seed=0)
        assert report.partial
        # "bad" synth cells and the merged "all" cells fail; TrRTeR cells for
        # "bad" still run (they do not touch the synthetic source)
        assert any("bad/TrSTeS" in e for e in report.errors)
        ok_rows = [r for r in report.rows if r[0] == "ok"]
        assert len(ok_rows) == 5

    def test_deterministic_metric_rows(self, tmp_path):
        splits = make_splits()
        synth = make_synth()
        r1 = run_matrix({"g": synth}, splits, quick_cfg(), n_repeats=1, base_seed=3)
        r2 = run_matrix({"g": synth}, splits, quick_cfg(), n_repeats=1, base_seed=3)
        m1 = [(g, s, i, rep.accuracy, rep.f1_macro, rep.roc_auc_macro)
              for g, s, i, rep in r1.rows]
        m2 = [(g, s, i, rep.accuracy, rep.f1_macro, rep.roc_auc_macro)
              for g, s, i, rep in r2.rows]
        assert m1 == m2

    def test_csv_written_sorted(self, tmp_path):
        splits = make_splits()
        report = run_matrix({"g": make_synth()}, splits, quick_cfg(),
                            n_repeats=1, base_seed=0)
        path = report.write_csv(tmp_path / "matrix.csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0].split(",")[0] == "setting"
        assert len(lines) == 1 + len(report.rows)
        agg = report.write_aggregates_csv(tmp_path / "agg.csv")
        assert len(agg.read_text().strip().splitlines()) == 1 + 2 * 5

    def test_empty_sources_rejected(self):
        with pytest.raises(SourceError):
            run_matrix({}, make_splits(), quick_cfg())


class TestTransfer:
    def test_plan_validation(self):
        with pytest.raises(SchemaError):
            TransferPlan(fractions=(0.4, 0.2))
        with pytest.raises(SchemaError):
            TransferPlan(fractions=(0.0, 0.5))

    def _pretrained(self, splits, cfg):
        synth = make_synth(per_class=8, seconds=splits.train.samples / 100)
        s_train, s_val, _ = rs.stratified_split(synth, SplitSpec(0.7, 0.15, 0.15, seed=0))
        model = build_classifier(cfg, splits.train.leads, splits.train.samples, seed=0)
        model, _ = train_classifier(model, s_train, s_val, cfg, seed=0)
        return model

    def test_frozen_params_bit_identical_across_sweep(self):
        splits = make_splits(per_class=10)
        cfg = quick_cfg(max_epochs=4)
        pretrained = self._pretrained(splits, cfg)
        plan = TransferPlan(fractions=(0.5, 1.0), n_repeats=1)
        # instrument: snapshot conv params of the pretrained source
        conv_before = {n: p.data.copy() for n, p in pretrained.named_params()
                       if n.startswith(("stem", "blocks"))}
        report = run_transfer(pretrained, splits, plan, cfg, base_seed=0)
        assert len(report.rows) == 2
        for n, p in pretrained.named_params():
            if n.startswith(("stem", "blocks")):
                assert p.data.tobytes() == conv_before[n].tobytes()

    def test_clone_freezes_only_head_trains(self):
        splits = make_splits(per_class=10)
        cfg = quick_cfg(max_epochs=3)
        pretrained = self._pretrained(splits, cfg)
        from ecgsynth.nn import freeze_all_except_head
        from ecgsynth.classifier import ResidualCnn
        tuned = clone_classifier(pretrained, seed=1)
        freeze_all_except_head(tuned, ResidualCnn.HEAD_LAYERS)
        stem_before = tuned.stem.weight.data.tobytes()
        head_before = tuned.out.weight.data.tobytes()
        tuned, _ = train_classifier(tuned, splits.train, splits.val, cfg, seed=1)
        assert tuned.stem.weight.data.tobytes() == stem_before
        assert tuned.out.weight.data.tobytes() != head_before

    def test_fine_tune_faster_than_fresh(self):
        splits = make_splits(per_class=12, seconds=4)
        cfg = quick_cfg(max_epochs=12, patience=4)
        pretrained = self._pretrained(splits, cfg)
        plan = TransferPlan(fractions=(0.5, 1.0), n_repeats=1)
        report = run_transfer(pretrained, splits, plan, cfg, base_seed=1)
        for row in report.rows:
            assert row.fine_tune.wall_time_s < row.baseline.wall_time_s, \
                f"fraction {row.fraction}"

    def test_transfer_csv(self, tmp_path):
        splits = make_splits(per_class=8)
        cfg = quick_cfg(max_epochs=2)
        pretrained = self._pretrained(splits, cfg)
        report = run_transfer(pretrained, splits, TransferPlan(fractions=(1.0,)),
                              cfg, base_seed=0)
        path = report.write_csv(tmp_path / "transfer.csv")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1 + 2  # fine_tune + baseline rows
        assert lines[1].split(",")[2] == "fine_tune"
