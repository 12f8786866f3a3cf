"""Conditional denoising diffusion generator for multichannel signals.

Three pluggable noise-prediction backbones share one schedule and one label
conditioning scheme (shared class embedding, per-layer 1x1 projections added
as biases after the main convolutions):

* dilated residual stack with gated activations,
* a 3-level 1D U-Net with skip concatenation,
* a trend/seasonality/residual decomposition head that predicts the clean
  signal and is converted to noise prediction through the schedule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import NumericError, ShapeError, StepError
from .nn.tensor import Tensor
from .records import Dataset, EcgRecord, RhythmClass, Source

D_LABEL = 128  # shared class-embedding width


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with cumulative signal-retention products."""

    betas: np.ndarray  # beta_t for t = 1..T at index t-1

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ShapeError("betas must be a non-empty 1D array")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ShapeError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def coeffs(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(sqrt(abar_t), sqrt(1 - abar_t)) for 1-based step indices."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise StepError(f"step indices must lie in [1, {self.T}]")
        abar = self.alpha_bars[t - 1]
        return np.sqrt(abar), np.sqrt(1.0 - abar)


def linear_schedule(T: int = 200, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, T))


def forward_diffuse(x0: np.ndarray, t: int, schedule: NoiseSchedule,
                    noise_seed: int = 0, noise: np.ndarray | None = None) -> np.ndarray:
    """Closed-form marginal q(x_t | x_0) = sqrt(abar) x0 + sqrt(1-abar) eps."""
    if not 1 <= t <= schedule.T:
        raise StepError(f"t={t} outside schedule of length {schedule.T}")
    if noise is None:
        noise = np.random.default_rng(noise_seed).standard_normal(x0.shape)
    a, s = schedule.coeffs(np.array([t]))
    return a[0] * x0 + s[0] * noise


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style step embedding for integer steps ``t`` (float32)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class LabelConditioner(nn.Module):
    """Shared class embedding plus per-layer 1x1 projections.

    The gated stack projects to 2C channels per residual layer; other
    backbones pass their own per-layer widths.
    """

    def __init__(self, n_classes: int, layer_widths: list[int],
                 rng: np.random.Generator, d_label: int = D_LABEL):
        self.embedding = nn.Embedding(n_classes, d_label, rng)
        self.projections = [nn.Dense(d_label, w, rng) for w in layer_widths]

    def bias(self, layer: int, labels: np.ndarray) -> Tensor:
        """(batch, width_layer, 1) bias for one layer."""
        emb = self.embedding(labels)
        proj = self.projections[layer](emb)
        return proj.reshape(proj.shape[0], proj.shape[1], 1)


class TimeEmbed(nn.Module):
    def __init__(self, dim: int, out: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = nn.Dense(dim, out, rng)
        self.fc2 = nn.Dense(out, out, rng)

    def forward(self, t: np.ndarray) -> Tensor:
        return self.fc2(self.fc1(Tensor(sinusoidal_embedding(t, self.dim))).relu()).relu()


@dataclass
class DdpmConfig:
    backbone: str = "dilated"  # dilated | unet | decomposition
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    channels: int = 16
    n_layers: int = 6          # dilated residual layers (dilation doubles, cycling)
    max_dilation: int = 128
    n_levels: int = 3          # unet resolution levels
    n_blocks: int = 2          # decomposition blocks
    poly_degree: int = 3
    n_seasonal_bins: int = 8
    lr: float = 2e-3
    steps: int = 600
    batch_size: int = 16
    n_classes: int = 7

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)


class DilatedResidualBackbone(nn.Module):
    """Gated dilated-convolution stack; label bias enters after each dilated
    conv, step embedding before it."""

    def __init__(self, cfg: DdpmConfig, leads: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.cfg = cfg
        self.leads = leads
        self.inp = nn.Conv1d(leads, c, 1, rng)
        self.time_embed = TimeEmbed(64, c, rng)
        self.dilated = []
        self.res_proj = []
        self.skip_proj = []
        dilation = 1
        for _ in range(cfg.n_layers):
            self.dilated.append(nn.Conv1d(c, 2 * c, 3, rng, dilation=dilation))
            self.res_proj.append(nn.Conv1d(c, c, 1, rng))
            self.skip_proj.append(nn.Conv1d(c, c, 1, rng))
            dilation = dilation * 2 if dilation < cfg.max_dilation else 1
        self.conditioner = LabelConditioner(cfg.n_classes, [2 * c] * cfg.n_layers, rng)
        self.out1 = nn.Conv1d(c, c, 1, rng)
        self.out2 = nn.Conv1d(c, leads, 1, rng)

    def arch(self) -> str:
        return (f"ddpm-dilated-c{self.cfg.channels}-l{self.cfg.n_layers}"
                f"-T{self.cfg.T}-leads{self.leads}")

    def forward(self, x: Tensor, t: np.ndarray, labels: np.ndarray) -> Tensor:
        c = self.cfg.channels
        temb = self.time_embed(t)
        tbias = temb.reshape(temb.shape[0], c, 1)
        h = self.inp(x).relu()
        skip_sum = None
        for i, conv in enumerate(self.dilated):
            gate_in = conv(h + tbias) + self.conditioner.bias(i, labels)
            a = gate_in[:, :c, :]
            b = gate_in[:, c:, :]
            gated = a.tanh() * b.sigmoid()
            h = h + self.res_proj[i](gated)
            s = self.skip_proj[i](gated)
            skip_sum = s if skip_sum is None else skip_sum + s
        out = self.out1(skip_sum.relu()).relu()
        return self.out2(out)


class UNet1dBackbone(nn.Module):
    """3-level encoder/decoder with stride-2 downsampling, nearest-neighbour
    upsampling and skip concatenation; label and step biases at every level."""

    def __init__(self, cfg: DdpmConfig, leads: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.cfg = cfg
        self.leads = leads
        self.n_levels = cfg.n_levels
        widths = [c * min(2 ** i, 2) for i in range(cfg.n_levels)]  # c, 2c, 2c...
        self.inp = nn.Conv1d(leads, c, 3, rng)
        self.time_embed = TimeEmbed(64, c, rng)
        self.time_proj = [nn.Dense(c, w, rng) for w in widths]
        self.down = []
        prev = c
        for w in widths:
            self.down.append(nn.Conv1d(prev, w, 3, rng, stride=2))
            prev = w
        self.mid = nn.Conv1d(prev, prev, 3, rng)
        self.up = []
        self.up_mix = []
        for i in reversed(range(cfg.n_levels)):
            skip_w = widths[i - 1] if i > 0 else c
            self.up.append(nn.Conv1d(prev, skip_w, 3, rng))
            self.up_mix.append(nn.Conv1d(2 * skip_w, skip_w, 3, rng))
            prev = skip_w
        self.conditioner = LabelConditioner(cfg.n_classes, widths, rng)
        self.out = nn.Conv1d(c, leads, 1, rng)

    def arch(self) -> str:
        return (f"ddpm-unet-c{self.cfg.channels}-lv{self.cfg.n_levels}"
                f"-T{self.cfg.T}-leads{self.leads}")

    def forward(self, x: Tensor, t: np.ndarray, labels: np.ndarray) -> Tensor:
        temb = self.time_embed(t)
        h = self.inp(x).relu()
        skips = [h]
        for i, down in enumerate(self.down):
            tb = self.time_proj[i](temb)
            h = down(h)
            h = (h + tb.reshape(tb.shape[0], -1, 1) + self.conditioner.bias(i, labels)).relu()
            skips.append(h)
        h = self.mid(h).relu()
        for j, (up, mix) in enumerate(zip(self.up, self.up_mix)):
            skip = skips[-(j + 2)]
            h = nn.upsample_nearest(h, 2)
            h = up(h).relu()
            if h.shape[-1] != skip.shape[-1]:  # odd-length levels
                h = h[:, :, :skip.shape[-1]]
            h = mix(nn.concatenate([h, skip], axis=1)).relu()
        return self.out(h)


# -- decomposition backbone ----------------------------------------------------


def poly_basis(length: int, degree: int, dtype=np.float32) -> np.ndarray:
    """Columns [1, c, ..., c^p] over c = [0..length-1]/length."""
    c = np.arange(length, dtype=np.float64) / length
    return np.stack([c ** k for k in range(degree + 1)], axis=1).astype(dtype)


def top_amplitude_mask(spec_data: np.ndarray, n_top: int) -> np.ndarray:
    """0/1 mask over rfft bins keeping the ``n_top`` largest amplitudes.

    DC is excluded (it belongs to the trend); ties break toward lower bins.
    ``spec_data`` is stacked (..., 2, bins).
    """
    amp = np.sqrt(spec_data[..., 0, :] ** 2 + spec_data[..., 1, :] ** 2)
    amp[..., 0] = -np.inf
    bins = amp.shape[-1]
    mask = np.zeros_like(amp)
    if n_top <= 0:
        return mask[..., None, :] * np.ones((2, 1), dtype=amp.dtype)
    n_top = min(n_top, bins - 1)
    # stable ranking: sort by (-amplitude, bin index)
    order = np.argsort(-amp, axis=-1, kind="stable")
    keep = order[..., :n_top]
    np.put_along_axis(mask, keep, 1.0, axis=-1)
    return mask[..., None, :] * np.ones((2, 1), dtype=amp.dtype)


def decomposition_synthesize(trend_weights: list[Tensor], block_outputs: list[Tensor],
                             residual: Tensor, n_seasonal_bins: int,
                             ) -> tuple[Tensor, dict]:
    """Combine per-block trend projections, Fourier-selected seasonal parts
    and the residual into a clean-signal estimate.

    ``trend_weights[i]`` is (batch, leads, degree+1); ``block_outputs[i]`` and
    ``residual`` are (batch, leads, length). Returns (x0_hat, components) with
    the trend, seasonal and residual parts exposed separately.
    """
    length = residual.shape[-1]
    trend_total = None
    seasonal_total = None
    for w, o in zip(trend_weights, block_outputs):
        basis = Tensor(poly_basis(length, w.shape[-1] - 1, dtype=w.dtype.type))
        block_trend = w @ basis.transpose((1, 0)) + o.mean(axis=-1, keepdims=True)
        trend_total = block_trend if trend_total is None else trend_total + block_trend
        spec = nn.rfft_stack(o)
        mask = top_amplitude_mask(spec.data, n_seasonal_bins)
        seasonal = nn.irfft_stack(spec * Tensor(mask), n=length)
        seasonal_total = seasonal if seasonal_total is None else seasonal_total + seasonal
    if trend_total is None:
        trend_total = Tensor(np.zeros_like(residual.data))
        seasonal_total = Tensor(np.zeros_like(residual.data))
    x0 = trend_total + seasonal_total + residual
    return x0, {"trend": trend_total, "seasonal": seasonal_total, "residual": residual}


class DecompositionBackbone(nn.Module):
    """Predicts the clean signal as trend + seasonality + residual, then maps
    it to noise prediction through the schedule coefficients."""

    def __init__(self, cfg: DdpmConfig, leads: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.cfg = cfg
        self.leads = leads
        self.inp = nn.Conv1d(leads, c, 3, rng)
        self.time_embed = TimeEmbed(64, c, rng)
        self.conditioner = LabelConditioner(cfg.n_classes, [c] * cfg.n_blocks, rng)
        self.blocks = [nn.Conv1d(c, c, 3, rng) for _ in range(cfg.n_blocks)]
        self.block_out = [nn.Conv1d(c, leads, 1, rng) for _ in range(cfg.n_blocks)]
        self.trend_head = [nn.Dense(c, leads * (cfg.poly_degree + 1), rng)
                           for _ in range(cfg.n_blocks)]
        self.res_head = nn.Conv1d(c, leads, 1, rng)
        self._schedule = cfg.schedule()

    def arch(self) -> str:
        return (f"ddpm-decomp-c{self.cfg.channels}-b{self.cfg.n_blocks}"
                f"-p{self.cfg.poly_degree}-T{self.cfg.T}-leads{self.leads}")

    def predict_x0(self, x: Tensor, t: np.ndarray, labels: np.ndarray,
                   ) -> tuple[Tensor, dict]:
        cfg = self.cfg
        temb = self.time_embed(t)
        tbias = temb.reshape(temb.shape[0], cfg.channels, 1)
        h = self.inp(x).relu()
        weights, outputs = [], []
        for i, block in enumerate(self.blocks):
            h = nn.residual_add(h, block(h + tbias + self.conditioner.bias(i, labels))).relu()
            pooled = h.mean(axis=-1)
            w = self.trend_head[i](pooled)
            weights.append(w.reshape(w.shape[0], self.leads, cfg.poly_degree + 1))
            outputs.append(self.block_out[i](h))
        residual = self.res_head(h)
        return decomposition_synthesize(weights, outputs, residual, cfg.n_seasonal_bins)

    def forward(self, x: Tensor, t: np.ndarray, labels: np.ndarray) -> Tensor:
        x0_hat, _ = self.predict_x0(x, t, labels)
        a, s = self._schedule.coeffs(np.asarray(t))
        a = a.astype(x.dtype.type)[:, None, None]
        s = s.astype(x.dtype.type)[:, None, None]
        return (x - x0_hat * Tensor(a)) / Tensor(s)


_BACKBONES = {
    "dilated": DilatedResidualBackbone,
    "unet": UNet1dBackbone,
    "decomposition": DecompositionBackbone,
}


def build_backbone(cfg: DdpmConfig, leads: int, seed: int = 0) -> nn.Module:
    if cfg.backbone not in _BACKBONES:
        raise ShapeError(f"unknown backbone {cfg.backbone!r}; choose from {sorted(_BACKBONES)}")
    return _BACKBONES[cfg.backbone](cfg, leads, seed=seed)


def train_step(backbone: nn.Module, schedule: NoiseSchedule, x0: np.ndarray,
               labels: np.ndarray, rng: np.random.Generator,
               noise: np.ndarray | None = None,
               t: np.ndarray | None = None) -> Tensor:
    """One noise-prediction step: uniform t, closed-form corruption, MSE.

    ``x0`` must already be normalized to roughly unit scale per channel.
    """
    n = len(x0)
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=n)
    if noise is None:
        noise = rng.standard_normal(x0.shape).astype(x0.dtype)
    a, s = schedule.coeffs(t)
    xt = a[:, None, None] * x0 + s[:, None, None] * noise
    pred = backbone(Tensor(xt.astype(np.float32)), t, labels)
    loss = nn.mse(pred, Tensor(noise.astype(np.float32)))
    if not np.isfinite(loss.data):
        raise NumericError(
            f"non-finite diffusion loss (batch {n}, t range {t.min()}..{t.max()})")
    return loss


class DdpmGenerator:
    """Trainable conditional diffusion model over a fixed record geometry."""

    def __init__(self, cfg: DdpmConfig, leads: int, length: int, seed: int = 0):
        self.cfg = cfg
        self.leads = leads
        self.length = length
        self.seed = seed
        self.schedule = cfg.schedule()
        self.backbone = build_backbone(cfg, leads, seed=seed)
        self.norm_mean = np.zeros(leads, dtype=np.float32)
        self.norm_std = np.ones(leads, dtype=np.float32)

    def arch(self) -> str:
        return self.backbone.arch() + f"-len{self.length}"

    def _normalize(self, signals: np.ndarray) -> np.ndarray:
        return (signals - self.norm_mean[:, None]) / self.norm_std[:, None]

    def _denormalize(self, signals: np.ndarray) -> np.ndarray:
        return signals * self.norm_std[:, None] + self.norm_mean[:, None]

    def fit_normalizer(self, ds: Dataset) -> None:
        x = ds.signals_array(dtype=np.float64)
        self.norm_mean = x.mean(axis=(0, 2)).astype(np.float32)
        self.norm_std = np.maximum(x.std(axis=(0, 2)), 1e-6).astype(np.float32)

    def train(self, ds: Dataset, seed: int = 0, log_every: int = 0) -> dict:
        if ds.samples != self.length or ds.leads != self.leads:
            raise ShapeError(
                f"dataset geometry ({ds.leads}, {ds.samples}) does not match "
                f"model ({self.leads}, {self.length})")
        self.fit_normalizer(ds)
        x = self._normalize(ds.signals_array())
        y = ds.labels_array()
        rng = np.random.default_rng(seed)
        opt = nn.Adam(self.backbone.params(), lr=self.cfg.lr)
        history = {"loss": [], "seconds": 0.0}
        t0 = time.perf_counter()
        for step in range(self.cfg.steps):
            idx = rng.integers(0, len(x), size=min(self.cfg.batch_size, len(x)))
            loss = train_step(self.backbone, self.schedule, x[idx], y[idx], rng)
            self.backbone.zero_grads()
            loss.backward()
            opt.step()
            history["loss"].append(loss.item())
            if log_every and (step + 1) % log_every == 0:
                print(f"  ddpm step {step + 1}/{self.cfg.steps} "
                      f"loss {np.mean(history['loss'][-log_every:]):.4f}", flush=True)
        history["seconds"] = time.perf_counter() - t0
        return history

    def sample(self, label: RhythmClass, n: int, seed: int = 0) -> np.ndarray:
        """Ancestral reverse chain from Gaussian latents; output in mV."""
        if n == 0:
            return np.zeros((0, self.leads, self.length))
        rng = np.random.default_rng(seed)
        self.backbone.eval_mode()
        x = rng.standard_normal((n, self.leads, self.length)).astype(np.float32)
        labels = np.full(n, int(label))
        betas = self.schedule.betas
        alphas = self.schedule.alphas
        abars = self.schedule.alpha_bars
        for t in range(self.schedule.T, 0, -1):
            eps = self.backbone(Tensor(x), np.full(n, t), labels).data
            if not np.all(np.isfinite(eps)):
                raise NumericError(f"non-finite sample state at reverse step {t}")
            coef = betas[t - 1] / np.sqrt(1.0 - abars[t - 1])
            x = (x - coef * eps) / np.sqrt(alphas[t - 1])
            if t > 1:
                x = x + np.sqrt(betas[t - 1]) * rng.standard_normal(x.shape)
            x = x.astype(np.float32)
        self.backbone.train_mode()
        return self._denormalize(x.astype(np.float64))

    def synthesize_dataset(self, per_class: dict[RhythmClass, int], fs: float,
                           seed: int = 0, tag: str = "ddpm") -> Dataset:
        records = []
        for cls in sorted(per_class, key=int):
            signals = self.sample(cls, per_class[cls], seed=seed + int(cls))
            for i, sig in enumerate(signals):
                records.append(EcgRecord(
                    signal=sig, fs=fs, label=cls,
                    record_id=f"syn-{tag}-{cls.code}-{seed}-{i}",
                    source=Source.SYNTHETIC))
        return Dataset(records=records)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        arrays = dict(self.backbone.state_arrays())
        arrays["_norm/mean"] = self.norm_mean
        arrays["_norm/std"] = self.norm_std
        meta = {"backbone": self.cfg.backbone, "T": self.cfg.T,
                "leads": self.leads, "length": self.length}
        nn.save_arrays(path, arrays, arch=self.arch(), seed=self.seed, meta=meta)

    @classmethod
    def load(cls, path, cfg: DdpmConfig, leads: int, length: int) -> "DdpmGenerator":
        gen = cls(cfg, leads, length)
        arrays, meta = nn.load_arrays(path)
        if meta.get("arch") != gen.arch():
            from .errors import VersionError
            raise VersionError(f"checkpoint arch {meta.get('arch')!r} != {gen.arch()!r}")
        gen.norm_mean = arrays.pop("_norm/mean")
        gen.norm_std = arrays.pop("_norm/std")
        gen.backbone.load_state_arrays(arrays)
        return gen
