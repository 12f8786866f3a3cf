"""record-store contracts: WFDB bit-exactness, fixture class signatures,
resampling, merge arithmetic and stratified splits."""

import numpy as np
import pytest

from ecgsynth import records as rs
from ecgsynth.errors import (
    ParseError,
    RangeError,
    SchemaError,
    StratifyError,
    TruncatedData,
    UnsupportedFormat,
    UnsupportedRatio,
)
from ecgsynth.records import Dataset, EcgRecord, RhythmClass, Source, SplitSpec


def make_record(signal, fs=100.0, label=RhythmClass.SR, record_id="r0",
                source=Source.FIXTURE):
    return EcgRecord(signal=np.asarray(signal, dtype=np.float64), fs=fs, label=label,
                     record_id=record_id, source=source)


def detect_beats(signal_row, fs):
    """Threshold peak counter: independent oracle for fixture rate claims."""
    x = signal_row
    thresh = 0.55 * x.max()
    min_gap = int(0.25 * fs)
    peaks = []
    for i in range(1, len(x) - 1):
        if x[i] > thresh and x[i] >= x[i - 1] and x[i] >= x[i + 1]:
            if not peaks or i - peaks[-1] >= min_gap:
                peaks.append(i)
    return len(peaks)


class TestRhythmClass:
    def test_fixed_bijection(self):
        expected = {"SBRAD": 0, "SR": 1, "AFIB": 2, "STACH": 3, "AFLT": 4,
                    "SARRH": 5, "SVTAC": 6}
        for code, idx in expected.items():
            assert int(RhythmClass.from_code(code)) == idx
            assert RhythmClass(idx).code == code

    def test_unknown_code(self):
        with pytest.raises(SchemaError):
            RhythmClass.from_code("VTACH")


class TestWfdb:
    def test_hand_applied_scaling(self, tmp_path):
        # header: 1 signal, fmt 16, gain 1000, baseline 0; .dat int16 [1000]
        (tmp_path / "a.hea").write_text("a 1 100 1\na.dat 16 1000(0)/mV 16 0 1000 1000 0 lead0\n")
        (tmp_path / "a.dat").write_bytes(np.array([1000], dtype="<i2").tobytes())
        rec = rs.read_wfdb(tmp_path / "a.hea")
        assert rec.signal.shape == (1, 1)
        assert rec.signal[0, 0] == pytest.approx(1.0)  # (1000 - 0)/1000 mV

    def test_zero_adc_zero_mv(self, tmp_path):
        (tmp_path / "z.hea").write_text("z 1 100 1\nz.dat 16 200(0)/mV\n")
        (tmp_path / "z.dat").write_bytes(np.array([0], dtype="<i2").tobytes())
        assert rs.read_wfdb(tmp_path / "z.hea").signal[0, 0] == 0.0

    def test_deinterleave_two_signals(self, tmp_path):
        # stored order [1, 2, 3, 4] -> rows [1, 3] and [2, 4]
        (tmp_path / "d.hea").write_text(
            "d 2 100 2\nd.dat 16 1(0)/mV\nd.dat 16 1(0)/mV\n")
        (tmp_path / "d.dat").write_bytes(np.array([1, 2, 3, 4], dtype="<i2").tobytes())
        rec = rs.read_wfdb(tmp_path / "d.hea")
        assert np.array_equal(rec.signal, [[1.0, 3.0], [2.0, 4.0]])

    def test_unsupported_format(self, tmp_path):
        (tmp_path / "u.hea").write_text("u 1 100 1\nu.dat 212 200(0)/mV\n")
        (tmp_path / "u.dat").write_bytes(b"\x00\x00")
        with pytest.raises(UnsupportedFormat):
            rs.read_wfdb(tmp_path / "u.hea")

    def test_truncated_dat(self, tmp_path):
        (tmp_path / "t.hea").write_text("t 1 100 10\nt.dat 16 200(0)/mV\n")
        (tmp_path / "t.dat").write_bytes(np.zeros(4, dtype="<i2").tobytes())
        with pytest.raises(TruncatedData):
            rs.read_wfdb(tmp_path / "t.hea")

    def test_malformed_header_reports_line(self, tmp_path):
        (tmp_path / "m.hea").write_text("m 1 100\n")  # missing nsamples
        with pytest.raises(ParseError, match="line 1"):
            rs.read_wfdb(tmp_path / "m.hea")

    def test_write_zero_record_dat_size(self, tmp_path):
        rec = make_record(np.zeros((3, 7)))
        _, dat = rs.write_wfdb(rec, gain=1000, out_dir=tmp_path)
        assert dat.stat().st_size == 2 * 3 * 7

    def test_quantization_rule(self, tmp_path):
        rec = make_record([[1.0]])
        rs.write_wfdb(rec, gain=1000, out_dir=tmp_path)
        raw = np.frombuffer((tmp_path / "r0.dat").read_bytes(), dtype="<i2")
        assert raw[0] == 1000

    def test_overflow_raises_range_error(self, tmp_path):
        rec = make_record([[40.0]])  # 40 mV * 1000 = 40000 > 32767
        with pytest.raises(RangeError):
            rs.write_wfdb(rec, gain=1000, out_dir=tmp_path)

    def test_roundtrip_bit_exact_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        rec = make_record(rng.uniform(-2, 2, (2, 50)), label=RhythmClass.AFIB)
        gain = 1000.0
        hea, _ = rs.write_wfdb(rec, gain=gain, out_dir=tmp_path)
        back = rs.read_wfdb(hea)
        assert np.array_equal(back.signal, rs.quantized(rec, gain))
        assert back.label == RhythmClass.AFIB
        assert back.fs == rec.fs

    def test_roundtrip_many_seeds_property(self, tmp_path):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            rec = make_record(rng.uniform(-30, 30, (3, 20)), record_id=f"p{seed}")
            hea, _ = rs.write_wfdb(rec, gain=1000, out_dir=tmp_path)
            assert np.array_equal(rs.read_wfdb(hea).signal, rs.quantized(rec, 1000))


class TestFixture:
    def test_determinism(self):
        a = rs.generate_fixture(RhythmClass.SR, 100, 10, 2, seed=5)
        b = rs.generate_fixture(RhythmClass.SR, 100, 10, 2, seed=5)
        assert a.signal.tobytes() == b.signal.tobytes()

    def test_seed_changes_signal(self):
        a = rs.generate_fixture(RhythmClass.SR, 100, 10, 2, seed=5)
        b = rs.generate_fixture(RhythmClass.SR, 100, 10, 2, seed=6)
        assert not np.array_equal(a.signal, b.signal)

    def test_sbrad_beat_count(self):
        rec = rs.generate_fixture(RhythmClass.SBRAD, 100, 10, 1, seed=3)
        assert detect_beats(rec.signal[0], 100) <= 10

    def test_stach_beat_count(self):
        rec = rs.generate_fixture(RhythmClass.STACH, 100, 10, 1, seed=3)
        assert detect_beats(rec.signal[0], 100) >= 17

    def test_irregular_classes_rr_variation(self):
        for cls in (RhythmClass.AFIB, RhythmClass.SARRH):
            rec = rs.generate_fixture(cls, 500, 10, 1, seed=11)
            x = rec.signal[0]
            thresh = 0.55 * x.max()
            peaks = []
            for i in range(1, len(x) - 1):
                if x[i] > thresh and x[i] >= x[i - 1] and x[i] >= x[i + 1]:
                    if not peaks or i - peaks[-1] >= int(0.25 * 500):
                        peaks.append(i)
            rr = np.diff(peaks)
            assert rr.std() / rr.mean() >= 0.10, cls  # oracle on detected peaks

    def test_aflt_has_sawtooth_baseline(self):
        # project onto the 5 Hz sawtooth template: ~1.0 of the nominal
        # amplitude when the baseline is present, near 0 otherwise
        fs = 500
        t = np.arange(10 * fs) / fs
        template = 0.15 * (2 * ((t * 5.0) % 1.0) - 1.0)
        template = template - template.mean()

        def proj(x):
            return np.dot(x - x.mean(), template) / np.dot(template, template)

        for seed in range(4):
            saw = rs.generate_fixture(RhythmClass.AFLT, fs, 10, 1, seed=seed)
            plain = rs.generate_fixture(RhythmClass.SR, fs, 10, 1, seed=seed)
            assert proj(saw.signal[0]) > 0.75
            assert abs(proj(plain.signal[0])) < 0.6

    def test_invalid_fs_rejected(self):
        with pytest.raises(SchemaError):
            rs.generate_fixture(RhythmClass.SR, 128, 10, 1, seed=0)

    def test_dataset_builder_counts(self):
        ds = rs.generate_fixture_dataset([RhythmClass.SR, RhythmClass.AFIB], 4,
                                         100, 5, 2, seed=1)
        assert ds.class_counts == {RhythmClass.SR: 4, RhythmClass.AFIB: 4}
        assert len(ds.record_ids()) == 8


class TestResample:
    def test_length_arithmetic(self):
        rec = make_record(np.random.default_rng(0).standard_normal((1, 5000)), fs=500)
        out = rs.resample(rec, 100)
        assert out.samples == 1000
        assert out.fs == 100

    def test_constant_signal_invariant(self):
        rec = make_record(np.full((2, 400), 0.7), fs=500)
        out = rs.resample(rec, 100)
        assert np.allclose(out.signal, 0.7, atol=1e-12)

    def test_sinusoid_decimation_matches_analytic(self):
        fs, target = 500, 100
        t = np.arange(5000) / fs
        rec = make_record(np.sin(2 * np.pi * 5.0 * t)[None, :], fs=fs)
        out = rs.resample(rec, target)
        t2 = np.arange(out.samples) / target
        expected = np.sin(2 * np.pi * 5.0 * t2)
        interior = slice(32, -32)  # FIR edge transients excluded
        assert np.max(np.abs(out.signal[0][interior] - expected[interior])) < 1e-3

    def test_upsample_roundtrip_duration(self):
        rec = make_record(np.random.default_rng(1).standard_normal((1, 200)), fs=100)
        up = rs.resample(rec, 500)
        assert up.samples == 1000
        assert abs(up.seconds - rec.seconds) < 1.0 / 100

    def test_non_integer_ratio_rejected(self):
        rec = make_record(np.zeros((1, 100)), fs=500)
        with pytest.raises(UnsupportedRatio):
            rs.resample(rec, 300)


class TestMerge:
    def _ds(self, counts, fs=100, source=Source.PTBXL, tag="a", samples=100):
        recs = []
        for cls, n in counts.items():
            for i in range(n):
                recs.append(make_record(np.zeros((2, samples)), fs=fs, label=cls,
                                        record_id=f"{tag}-{cls.code}-{i}", source=source))
        return Dataset(records=recs)

    def test_reference_class_count_sums(self):
        # full-corpus counts for the two source datasets: SR 13404 + 6306,
        # AFLT 34 + 6218 (1-sample stub signals keep this cheap)
        a = self._ds({RhythmClass.SR: 13404, RhythmClass.AFLT: 34}, samples=1)
        b = self._ds({RhythmClass.SR: 6306, RhythmClass.AFLT: 6218},
                     source=Source.CHAPMAN, tag="b", samples=1)
        merged = rs.harmonize_merge(a, b, target_fs=100)
        assert merged.class_counts[RhythmClass.SR] == 19710
        assert merged.class_counts[RhythmClass.AFLT] == 6252

    def test_merge_with_empty_is_identity(self):
        a = self._ds({RhythmClass.SR: 3})
        merged = rs.harmonize_merge(a, Dataset(records=[]), target_fs=100)
        assert merged.class_counts == a.class_counts
        assert merged.record_ids() == a.record_ids()

    def test_sources_preserved(self):
        a = self._ds({RhythmClass.SR: 2}, source=Source.PTBXL)
        b = self._ds({RhythmClass.SR: 2}, source=Source.CHAPMAN, tag="b")
        merged = rs.harmonize_merge(a, b, target_fs=100)
        assert {r.source for r in merged.records} == {Source.PTBXL, Source.CHAPMAN}

    def test_lead_mismatch_rejected(self):
        a = self._ds({RhythmClass.SR: 1})
        b = Dataset(records=[make_record(np.zeros((3, 100)), label=RhythmClass.SR,
                                         record_id="x")])
        with pytest.raises(SchemaError):
            rs.harmonize_merge(a, b, target_fs=100)

    def test_merge_associative_on_counts(self):
        a = self._ds({RhythmClass.SR: 2, RhythmClass.AFIB: 1}, tag="a")
        b = self._ds({RhythmClass.SR: 1}, tag="b")
        c = self._ds({RhythmClass.AFIB: 3}, tag="c")
        left = rs.harmonize_merge(rs.harmonize_merge(a, b, 100), c, 100)
        right = rs.harmonize_merge(a, rs.harmonize_merge(b, c, 100), 100)
        assert left.class_counts == right.class_counts
        assert sorted(left.record_ids()) == sorted(right.record_ids())


class TestSplit:
    def _ds(self, per_class=10):
        return rs.generate_fixture_dataset(list(RhythmClass), per_class, 100, 2, 1, seed=4)

    def test_exact_proportions(self):
        train, val, test = rs.stratified_split(self._ds(10), SplitSpec(0.8, 0.1, 0.1, seed=0))
        for part, expect in ((train, 8), (val, 1), (test, 1)):
            assert all(v == expect for v in part.class_counts.values())

    def test_partition_of_whole(self):
        ds = self._ds(7)
        train, val, test = rs.stratified_split(ds, SplitSpec(0.6, 0.2, 0.2, seed=3))
        ids = [train.record_ids(), val.record_ids(), test.record_ids()]
        assert ids[0] | ids[1] | ids[2] == ds.record_ids()
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_deterministic_given_seed(self):
        ds = self._ds(9)
        s1 = rs.stratified_split(ds, SplitSpec(seed=7))
        s2 = rs.stratified_split(ds, SplitSpec(seed=7))
        for a, b in zip(s1, s2):
            assert [r.record_id for r in a.records] == [r.record_id for r in b.records]

    def test_seed_changes_permutation_not_counts(self):
        ds = self._ds(9)
        a = rs.stratified_split(ds, SplitSpec(seed=1))
        b = rs.stratified_split(ds, SplitSpec(seed=2))
        assert a[0].record_ids() != b[0].record_ids()
        assert a[0].class_counts == b[0].class_counts

    def test_small_class_rejected_with_name(self):
        recs = [make_record(np.zeros((1, 10)), label=RhythmClass.SVTAC,
                            record_id=f"s{i}") for i in range(2)]
        recs += [make_record(np.zeros((1, 10)), label=RhythmClass.SR,
                             record_id=f"r{i}") for i in range(5)]
        with pytest.raises(StratifyError, match="SVTAC"):
            rs.stratified_split(Dataset(records=recs), SplitSpec())

    def test_subsample_fraction(self):
        ds = self._ds(10)
        sub = rs.stratified_subsample(ds, 0.4, seed=0)
        assert all(v == 4 for v in sub.class_counts.values())
        with pytest.raises(StratifyError):
            rs.stratified_subsample(ds, 0.01, seed=0)

    def test_bad_split_spec(self):
        with pytest.raises(SchemaError):
            SplitSpec(0.5, 0.5, 0.5)
        with pytest.raises(SchemaError):
            SplitSpec(0.9, 0.1, -0.0)


class TestPersistence:
    def test_dataset_roundtrip(self, tmp_path):
        ds = rs.generate_fixture_dataset([RhythmClass.SR, RhythmClass.STACH], 3,
                                         100, 4, 2, seed=9)
        rs.save_dataset(ds, tmp_path, gain=2000)
        back = rs.load_dataset(tmp_path)
        assert back.class_counts == ds.class_counts
        assert back.record_ids() == ds.record_ids()
        by_id = {r.record_id: r for r in back.records}
        for rec in ds.records:
            assert np.array_equal(by_id[rec.record_id].signal, rs.quantized(rec, 2000))

    def test_manifest_errors(self, tmp_path):
        (tmp_path / "labels.csv").write_text("wrong,header,here\n")
        with pytest.raises(ParseError):
            rs.load_manifest(tmp_path / "labels.csv")
