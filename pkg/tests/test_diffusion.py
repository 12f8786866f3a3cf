"""Diffusion process oracles: schedule arithmetic, closed-form vs stepwise
chains, oracle-denoiser losses, sampling determinism and the decomposition
head's synthesis rules."""

import numpy as np
import pytest

from ecgsynth import records as rs
from ecgsynth.diffusion import (
    DdpmConfig,
    DdpmGenerator,
    DecompositionBackbone,
    DilatedResidualBackbone,
    NoiseSchedule,
    UNet1dBackbone,
    build_backbone,
    decomposition_synthesize,
    forward_diffuse,
    linear_schedule,
    poly_basis,
    top_amplitude_mask,
    train_step,
)
from ecgsynth.errors import ShapeError, StepError
from ecgsynth.nn.tensor import Tensor
from ecgsynth.records import RhythmClass


def desk_cfg(**kw):
    base = dict(T=20, channels=8, n_layers=3, n_blocks=2, steps=10, batch_size=4,
                n_classes=7)
    base.update(kw)
    return DdpmConfig(**base)


class TestSchedule:
    def test_alpha_bar_hand_computed(self):
        sched = NoiseSchedule(betas=np.full(5, 0.1))
        # abar_2 = (1 - 0.1)^2 = 0.81, mean coefficient sqrt = 0.9
        assert sched.alpha_bars[1] == pytest.approx(0.81)
        a, s = sched.coeffs(np.array([2]))
        assert a[0] == pytest.approx(0.9)
        assert s[0] == pytest.approx(np.sqrt(1 - 0.81))

    def test_alpha_bar_strictly_decreasing(self):
        sched = linear_schedule(200)
        assert np.all(np.diff(sched.alpha_bars) < 0)
        assert sched.alpha_bars[0] < 1.0

    def test_invalid_betas(self):
        with pytest.raises(ShapeError):
            NoiseSchedule(betas=np.array([0.0, 0.1]))
        with pytest.raises(ShapeError):
            NoiseSchedule(betas=np.array([1.0]))

    def test_step_bounds(self):
        sched = linear_schedule(10)
        with pytest.raises(StepError):
            forward_diffuse(np.zeros((1, 4)), 11, sched)
        with pytest.raises(StepError):
            forward_diffuse(np.zeros((1, 4)), 0, sched)


class TestForwardDiffuse:
    def test_zero_noise_limit_identity_like(self):
        # as abar -> 1 the marginal pins to x0; emulate with tiny betas
        sched = NoiseSchedule(betas=np.full(3, 1e-12))
        x0 = np.ones((2, 5))
        out = forward_diffuse(x0, 1, sched, noise=np.zeros_like(x0))
        assert np.allclose(out, x0, atol=1e-9)

    def test_closed_form_matches_stepwise_chain_mc(self):
        # 1e5 scalar draws through 4 explicit steps vs the marginal, 3 sigma
        sched = NoiseSchedule(betas=np.array([0.05, 0.1, 0.15, 0.2]))
        rng = np.random.default_rng(0)
        n = 100_000
        x0 = 1.7
        x = np.full(n, x0)
        for t in range(4):
            beta = sched.betas[t]
            x = np.sqrt(1 - beta) * x + np.sqrt(beta) * rng.standard_normal(n)
        abar = sched.alpha_bars[-1]
        want_mean = np.sqrt(abar) * x0
        want_var = 1 - abar
        se_mean = np.sqrt(want_var / n)
        se_var = want_var * np.sqrt(2.0 / (n - 1))
        assert abs(x.mean() - want_mean) < 3 * se_mean
        assert abs(x.var() - want_var) < 3 * se_var

    def test_marginal_sampling_statistics(self):
        sched = linear_schedule(50)
        rng = np.random.default_rng(1)
        draws = np.array([
            forward_diffuse(np.array([[2.0]]), 50, sched,
                            noise=rng.standard_normal((1, 1)))[0, 0]
            for _ in range(20_000)])
        a, s = sched.coeffs(np.array([50]))
        assert abs(draws.mean() - a[0] * 2.0) < 3 * s[0] / np.sqrt(len(draws))
        assert abs(draws.var() - s[0] ** 2) < 3 * s[0] ** 2 * np.sqrt(2 / len(draws))


class TestTrainStep:
    def test_oracle_denoiser_zero_loss(self):
        sched = linear_schedule(10)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((3, 2, 32)).astype(np.float32)
        noise = rng.standard_normal(x0.shape).astype(np.float32)

        class OracleBackbone:
            def __call__(self, xt, t, labels):
                return Tensor(noise)

        loss = train_step(OracleBackbone(), sched, x0, np.zeros(3, dtype=int),
                          rng, noise=noise)
        assert loss.item() == 0.0

    def test_zero_denoiser_loss_is_mean_square_noise(self):
        sched = linear_schedule(10)
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal((4, 2, 64)).astype(np.float32)
        noise = rng.standard_normal(x0.shape).astype(np.float32)

        class ZeroBackbone:
            def __call__(self, xt, t, labels):
                return Tensor(np.zeros_like(noise))

        loss = train_step(ZeroBackbone(), sched, x0, np.zeros(4, dtype=int),
                          rng, noise=noise)
        assert loss.item() == pytest.approx(np.mean(noise.astype(np.float64) ** 2),
                                            abs=1e-6)

    def test_untrained_backbone_loss_near_one(self):
        cfg = desk_cfg()
        backbone = build_backbone(cfg, leads=2, seed=0)
        sched = cfg.schedule()
        rng = np.random.default_rng(3)
        losses = [train_step(backbone, sched,
                             rng.standard_normal((8, 2, 64)).astype(np.float32),
                             rng.integers(0, 7, 8), rng).item()
                  for _ in range(10)]
        assert 0.5 < np.mean(losses) < 2.0  # E||eps||^2 per element is 1

    def test_memorization_loss_decreases(self):
        ds = rs.generate_fixture_dataset([RhythmClass.SR], 1, 100, 2, 2, seed=0)
        cfg = desk_cfg(steps=120, lr=3e-3, batch_size=4)
        gen = DdpmGenerator(cfg, leads=2, length=200, seed=0)
        history = gen.train(ds, seed=0)
        early = np.mean(history["loss"][:10])
        late = np.mean(history["loss"][-10:])
        assert late < early


class TestBackbones:
    @pytest.mark.parametrize("name,cls", [("dilated", DilatedResidualBackbone),
                                          ("unet", UNet1dBackbone),
                                          ("decomposition", DecompositionBackbone)])
    def test_forward_shape(self, name, cls):
        cfg = desk_cfg(backbone=name)
        backbone = build_backbone(cfg, leads=2, seed=0)
        assert isinstance(backbone, cls)
        x = Tensor(np.random.default_rng(0).standard_normal((3, 2, 64)).astype(np.float32))
        out = backbone(x, np.array([1, 5, 20]), np.array([0, 3, 6]))
        assert out.shape == (3, 2, 64)

    def test_unknown_backbone(self):
        with pytest.raises(ShapeError):
            build_backbone(desk_cfg(backbone="s4"), leads=2)

    def test_label_changes_output(self):
        backbone = build_backbone(desk_cfg(), leads=1, seed=0)
        x = Tensor(np.ones((1, 1, 32), dtype=np.float32))
        a = backbone(x, np.array([3]), np.array([0])).data
        b = backbone(x, np.array([3]), np.array([4])).data
        assert not np.allclose(a, b)


class TestSampling:
    def test_single_step_reverse_formula(self):
        # T=1 with a backbone that echoes its input: hand-evaluated posterior
        cfg = desk_cfg(T=1)
        gen = DdpmGenerator(cfg, leads=1, length=8, seed=0)

        class EchoBackbone:
            def __call__(self, xt, t, labels):
                return xt

            def eval_mode(self):
                return self

            def train_mode(self):
                return self

        gen.backbone = EchoBackbone()
        out = gen.sample(RhythmClass.SR, n=2, seed=9)
        beta = cfg.schedule().betas[0]
        rng = np.random.default_rng(9)
        x1 = rng.standard_normal((2, 1, 8)).astype(np.float32)
        want = (x1 - beta / np.sqrt(1 - (1 - beta)) * x1) / np.sqrt(1 - beta)
        assert np.allclose(out, want.astype(np.float32).astype(np.float64), atol=1e-6)

    def test_fixed_seed_identical_samples(self):
        gen = DdpmGenerator(desk_cfg(), leads=2, length=32, seed=1)
        a = gen.sample(RhythmClass.AFIB, 3, seed=4)
        b = gen.sample(RhythmClass.AFIB, 3, seed=4)
        assert a.tobytes() == b.tobytes()

    def test_n_zero_empty(self):
        gen = DdpmGenerator(desk_cfg(), leads=2, length=32)
        assert gen.sample(RhythmClass.SR, 0).shape == (0, 2, 32)

    def test_synthesize_dataset_shapes_and_ids(self):
        gen = DdpmGenerator(desk_cfg(T=5), leads=2, length=32)
        ds = gen.synthesize_dataset({RhythmClass.SR: 2, RhythmClass.AFIB: 3},
                                    fs=100, seed=0)
        assert ds.class_counts == {RhythmClass.SR: 2, RhythmClass.AFIB: 3}
        assert len(ds.record_ids()) == 5
        assert all(r.source == rs.Source.SYNTHETIC for r in ds.records)

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = desk_cfg()
        gen = DdpmGenerator(cfg, leads=2, length=32, seed=2)
        gen.norm_mean = np.array([0.5, -0.5], dtype=np.float32)
        gen.norm_std = np.array([2.0, 1.5], dtype=np.float32)
        gen.save(tmp_path / "g.ckpt")
        clone = DdpmGenerator.load(tmp_path / "g.ckpt", cfg, leads=2, length=32)
        assert clone.sample(RhythmClass.SR, 2, seed=3).tobytes() == \
            gen.sample(RhythmClass.SR, 2, seed=3).tobytes()


class TestDecompositionSynthesis:
    def test_all_zero_weights_returns_residual(self):
        rng = np.random.default_rng(0)
        residual = Tensor(rng.standard_normal((2, 1, 40)).astype(np.float32))
        zeros_w = [Tensor(np.zeros((2, 1, 4), dtype=np.float32))]
        zeros_o = [Tensor(np.zeros((2, 1, 40), dtype=np.float32))]
        x0, parts = decomposition_synthesize(zeros_w, zeros_o, residual, 3)
        assert np.allclose(x0.data, residual.data)
        assert np.allclose(parts["trend"].data, 0)
        assert np.allclose(parts["seasonal"].data, 0)

    def test_line_recovery_via_least_squares_weights(self):
        # degree-1 input with seasonality disabled: projecting the LS-fit
        # weights through the poly basis must reproduce the line
        length = 50
        t = np.arange(length) / length
        line = (0.7 * t - 0.2)[None, None, :]
        basis = poly_basis(length, 1, dtype=np.float64)
        w_ls, *_ = np.linalg.lstsq(basis, line[0, 0], rcond=None)
        x0, parts = decomposition_synthesize(
            [Tensor(w_ls[None, None, :].astype(np.float32))],
            [Tensor(np.zeros((1, 1, length), dtype=np.float32))],
            Tensor(np.zeros((1, 1, length), dtype=np.float32)), n_seasonal_bins=0)
        trend = parts["trend"].data[0, 0]
        corr = np.corrcoef(trend, line[0, 0])[0, 1]
        assert corr > 0.99
        assert np.allclose(trend, line[0, 0], atol=1e-5)

    def test_single_tone_selects_its_bin(self):
        length = 64
        tone_bin = 7
        t = np.arange(length)
        tone = np.cos(2 * np.pi * tone_bin * t / length)
        spec = np.fft.rfft(tone)
        stacked = np.stack([spec.real, spec.imag])[None, None]  # (1,1,2,bins)
        mask = top_amplitude_mask(stacked, n_top=1)
        assert mask[0, 0, 0, tone_bin] == 1.0
        assert mask[0, 0, 0].sum() == 1.0

    def test_mask_excludes_dc_and_breaks_ties_low(self):
        stacked = np.zeros((1, 1, 2, 6))
        stacked[0, 0, 0, 0] = 100.0  # DC huge but excluded
        stacked[0, 0, 0, 2] = 1.0
        stacked[0, 0, 0, 4] = 1.0  # tie with bin 2
        mask = top_amplitude_mask(stacked, n_top=1)
        assert mask[0, 0, 0, 0] == 0.0
        assert mask[0, 0, 0, 2] == 1.0
        assert mask[0, 0, 0, 4] == 0.0


class TestConditioningEffect:
    def test_rate_proxy_orders_classes_after_training(self):
        # 2-class fixture set; spectral centroid of STACH samples must exceed
        # SBRAD samples (heart-rate proxy)
        ds = rs.generate_fixture_dataset([RhythmClass.SBRAD, RhythmClass.STACH],
                                         10, 100, 4, 1, seed=0)
        cfg = desk_cfg(T=40, channels=12, n_layers=4, steps=260, lr=3e-3,
                       batch_size=8)
        gen = DdpmGenerator(cfg, leads=1, length=400, seed=0)
        gen.train(ds, seed=0)

        def centroid(batch):
            spec = np.abs(np.fft.rfft(batch, axis=-1))[:, :, 1:]
            freqs = np.arange(1, spec.shape[-1] + 1)
            return float((spec * freqs).sum() / spec.sum())

        slow = gen.sample(RhythmClass.SBRAD, 8, seed=1)
        fast = gen.sample(RhythmClass.STACH, 8, seed=2)
        assert centroid(fast) > centroid(slow)
