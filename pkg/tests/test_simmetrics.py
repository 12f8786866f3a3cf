"""Similarity-metric oracles: hand-evaluated kernels, brute-force MMD sums,
Monte-Carlo ordering, two-sample nulls and PCA spectra."""

import numpy as np
import pytest

from ecgsynth import records as rs
from ecgsynth.errors import SampleSizeError, SchemaError
from ecgsynth.records import Dataset, EcgRecord, RhythmClass, Source
from ecgsynth.simmetrics import (
    default_discriminator_config,
    export_embeddings,
    median_bandwidth,
    mmd_rbf,
    mmd_rbf_oracle,
    pca_fit,
    pca_transform,
    two_sample_score,
    _train_binary,
)


def dataset_from(arr, label=RhythmClass.SR, tag="d", fs=100.0):
    recs = [EcgRecord(signal=np.atleast_2d(sig), fs=fs, label=label,
                      record_id=f"{tag}{i}", source=Source.FIXTURE)
            for i, sig in enumerate(arr)]
    return Dataset(records=recs)


class TestMmd:
    def test_identical_sets_exactly_zero(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((10, 1, 20))
        result = mmd_rbf(x, x.copy())
        assert result.value == 0.0

    def test_two_point_hand_computation(self):
        # ||x - y||^2 = 2 sigma^2  ->  MMD^2 = 2 - 2 e^{-1}
        sigma = 0.7
        x = np.zeros((1, 1, 1))
        y = np.full((1, 1, 1), np.sqrt(2.0) * sigma)
        result = mmd_rbf(x, y, bandwidth=sigma)
        assert result.value == pytest.approx(2.0 - 2.0 * np.exp(-1.0), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((8, 1, 6))
        y = rng.standard_normal((5, 1, 6)) + 1.0
        assert mmd_rbf(x, y, 1.0).value == mmd_rbf(y, x, 1.0).value

    def test_matches_triple_sum_oracle(self):
        rng = np.random.default_rng(2)
        for n, m in ((5, 7), (12, 20)):
            x = rng.standard_normal((n, 1, 4))
            y = rng.standard_normal((m, 1, 4)) + 0.5
            fast = mmd_rbf(x, y, bandwidth=1.3).value
            slow = mmd_rbf_oracle(x.reshape(n, -1), y.reshape(m, -1), 1.3)
            assert fast == pytest.approx(slow, abs=1e-9)

    def test_nonnegative_always(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.standard_normal((6, 1, 3))
            y = rng.standard_normal((9, 1, 3))
            assert mmd_rbf(x, y).value >= 0.0

    def test_shifted_exceeds_null_in_95_of_100_trials(self):
        rng = np.random.default_rng(4)
        wins = 0
        for _ in range(100):
            x = rng.standard_normal((200, 1, 1))
            y_far = rng.standard_normal((200, 1, 1)) + 5.0
            y_null = rng.standard_normal((200, 1, 1))
            shifted = mmd_rbf(x, y_far, bandwidth=1.0).value
            null = mmd_rbf(x, y_null, bandwidth=1.0).value
            wins += shifted > null
        assert wins >= 95

    def test_median_heuristic_and_degenerate_flag(self):
        x = np.zeros((4, 1, 3))
        result = mmd_rbf(x, np.zeros((5, 1, 3)))
        assert result.degenerate and result.value == 0.0
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((6, 2)), rng.standard_normal((4, 2))
        med = median_bandwidth(a, b)
        pooled = np.concatenate([a, b])
        dists = [np.linalg.norm(p - q) for i, p in enumerate(pooled)
                 for q in pooled[i + 1:]]
        assert med == pytest.approx(np.median(dists))

    def test_empty_and_mismatched_inputs(self):
        with pytest.raises(SampleSizeError):
            mmd_rbf(np.zeros((0, 1, 3)), np.zeros((2, 1, 3)))
        with pytest.raises(SchemaError):
            mmd_rbf(np.zeros((2, 1, 3)), np.zeros((2, 1, 4)))


class TestTwoSample:
    def _fixture_halves(self, seed):
        ds = rs.generate_fixture_dataset([RhythmClass.SR, RhythmClass.AFIB], 100,
                                         100, 2, 1, seed=seed)
        recs = ds.records
        return Dataset(records=recs[::2]), Dataset(records=recs[1::2])

    def test_same_distribution_near_half(self):
        hits = 0
        for seed in range(5):
            a, b = self._fixture_halves(seed)
            result = two_sample_score(a, b, seed=seed)
            hits += 0.4 <= result.accuracy <= 0.6
        assert hits >= 4

    def test_offset_fully_separable(self):
        a, b = self._fixture_halves(7)
        shifted = Dataset(records=[
            EcgRecord(signal=r.signal + 10.0, fs=r.fs, label=r.label,
                      record_id=r.record_id + "s", source=r.source)
            for r in b.records])
        result = two_sample_score(a, shifted, seed=0)
        assert result.accuracy >= 0.95

    def test_label_flip_symmetry(self):
        a, b = self._fixture_halves(3)
        pred, truth = _train_binary(a.signals_array(np.float64),
                                    b.signals_array(np.float64),
                                    default_discriminator_config(), seed=1)
        acc = (pred == truth).mean()
        flipped = (pred == (1 - truth)).mean()
        assert flipped == pytest.approx(1.0 - acc, abs=1e-12)

    def test_small_sample_rejected(self):
        a, _ = self._fixture_halves(0)
        tiny = Dataset(records=a.records[:5])
        with pytest.raises(SampleSizeError):
            two_sample_score(tiny, a)


class TestPcaAndExport:
    def test_rank_one_data_first_component_dominates(self):
        rng = np.random.default_rng(0)
        direction = rng.standard_normal(30)
        x = np.outer(rng.standard_normal(50), direction)
        _, _, variances = pca_fit(x, 5)
        assert variances[0] / variances.sum() > 0.999

    def test_reconstruction_error_non_increasing(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((40, 12))
        errors = []
        for k in range(1, 13):
            comps, mean, _ = pca_fit(x, k)
            proj = pca_transform(x, comps, mean)
            recon = proj @ comps.T + mean
            errors.append(np.mean((x - recon) ** 2))
        assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))
        assert errors[-1] == pytest.approx(0.0, abs=1e-20)

    def test_export_row_count_and_schema(self, tmp_path):
        real = dataset_from(np.random.default_rng(0).standard_normal((6, 20)))
        synth = dataset_from(np.random.default_rng(1).standard_normal((4, 20)),
                             label=RhythmClass.AFIB, tag="s")
        path = export_embeddings(real, synth, tmp_path / "emb.csv", n_components=3)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1 + 6 + 4
        header = lines[0].split(",")
        assert header[:2] == ["origin", "class"]
        assert len(header) == 2 + 3
        assert lines[1].split(",")[0] == "real"
        assert lines[-1].split(",")[:2] == ["synth", "AFIB"]

    def test_export_without_pca_keeps_raw_width(self, tmp_path):
        real = dataset_from(np.random.default_rng(0).standard_normal((3, 8)))
        synth = dataset_from(np.random.default_rng(1).standard_normal((3, 8)), tag="s")
        path = export_embeddings(real, synth, tmp_path / "raw.csv", n_components=None)
        header = path.read_text().splitlines()[0].split(",")
        assert len(header) == 2 + 8
