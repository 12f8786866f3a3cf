"""Two-stage vector-quantized generator in the time-frequency domain.

Stage 1 learns dual-branch quantized autoencoders: the STFT of each signal is
split into low- and high-frequency bands, each band gets its own encoder,
EMA-updated codebook and decoder, and reconstruction happens in the time
domain through a differentiable inverse STFT (band zero-padding, windowed
overlap-add). Stage 2 freezes all of that and fits masked bidirectional
transformer priors over the token grids (the high-frequency prior conditions
on the full low-frequency grid). Sampling runs iterative confidence-based
unmasking under a cosine schedule with temperature annealing.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import dsp, nn
from .errors import ShapeError, StateError
from .nn.tensor import Tensor
from .records import Dataset, EcgRecord, RhythmClass, Source

MASK = -1  # token-grid sentinel; priors map it to their mask-token row


@dataclass
class VqvaeConfig:
    n_fft: int = 16
    hop: int = 8
    cutoff_bin: int | None = None  # default bins // 4
    K: int = 64                    # codebook entries per branch
    d: int = 32                    # code dimension
    hidden: int = 32
    lf_downsample: int = 4
    hf_downsample: int = 2
    commitment: float = 0.25
    ema_decay: float = 0.99
    stage1_steps: int = 500
    stage1_lr: float = 2e-3
    stage1_batch: int = 16
    stage2_steps: int = 400
    stage2_lr: float = 1e-3
    stage2_batch: int = 16
    d_model: int = 64
    n_heads: int = 2
    n_prior_layers: int = 2
    T_dec: int = 8
    temp_start: float = 1.0
    temp_end: float = 0.1
    n_classes: int = 7

    def resolved_cutoff(self) -> int:
        bins = self.n_fft // 2 + 1
        return self.cutoff_bin if self.cutoff_bin is not None else max(bins // 4, 1)


@dataclass
class MaskSchedule:
    """Cosine mask-fraction schedule with linear temperature annealing."""

    T_dec: int = 8
    temp_start: float = 1.0
    temp_end: float = 0.1

    def gamma(self, r: float) -> float:
        if r >= 1.0:
            return 0.0  # cos(pi/2) is ~6e-17 in floats; the schedule must hit 0
        return float(np.cos(np.pi * r / 2.0))

    def masks_remaining(self, round_idx: int, n_cells: int) -> int:
        """Mask count left after round ``round_idx`` (1-based)."""
        return int(np.ceil(self.gamma(round_idx / self.T_dec) * n_cells))

    def temperature(self, round_idx: int) -> float:
        if self.T_dec <= 1:
            return self.temp_end
        frac = (round_idx - 1) / (self.T_dec - 1)
        return self.temp_start + (self.temp_end - self.temp_start) * frac


class Codebook:
    """K discrete latent vectors with EMA updates and usage tracking."""

    def __init__(self, K: int, d: int, seed: int = 0, ema_decay: float = 0.99):
        if K < 2:
            raise ShapeError(f"codebook needs K >= 2, got {K}")
        self._rng = np.random.default_rng(seed)
        self.vectors = (self._rng.standard_normal((K, d)) * 0.5).astype(np.float32)
        self.usage = np.zeros(K, dtype=np.int64)
        self.ema_decay = ema_decay
        self._ema_size = np.ones(K, dtype=np.float64)
        self._ema_sum = self.vectors.astype(np.float64).copy()
        self._initialized = False

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def init_from(self, z: np.ndarray) -> None:
        """Seed codes from data vectors (with replacement if data is short)."""
        flat = z.reshape(-1, self.d)
        picks = self._rng.choice(len(flat), size=self.K, replace=len(flat) < self.K)
        self.vectors = flat[picks].astype(np.float32).copy()
        self.vectors += 1e-4 * self._rng.standard_normal(self.vectors.shape).astype(np.float32)
        self._ema_sum = self.vectors.astype(np.float64).copy()
        self._ema_size = np.ones(self.K, dtype=np.float64)
        self._initialized = True

    def nearest(self, flat: np.ndarray) -> np.ndarray:
        """Index of the closest code per row; ties go to the lowest index."""
        d2 = (flat ** 2).sum(axis=1, keepdims=True) \
            - 2.0 * flat @ self.vectors.T.astype(flat.dtype) \
            + (self.vectors.astype(flat.dtype) ** 2).sum(axis=1)
        return np.argmin(d2, axis=1)

    def ema_update(self, flat: np.ndarray, ids: np.ndarray) -> None:
        decay = self.ema_decay
        counts = np.bincount(ids, minlength=self.K).astype(np.float64)
        sums = np.zeros((self.K, self.d), dtype=np.float64)
        np.add.at(sums, ids, flat.astype(np.float64))
        self._ema_size = decay * self._ema_size + (1 - decay) * counts
        self._ema_sum = decay * self._ema_sum + (1 - decay) * sums
        self.vectors = (self._ema_sum / np.maximum(self._ema_size, 1e-5)[:, None]
                        ).astype(np.float32)
        self.usage += counts.astype(np.int64)


@dataclass
class TokenGrid:
    """Integer grid of codebook indices; MASK entries only appear while a
    stage-2 prior is filling the grid in."""

    s: np.ndarray
    K: int

    def __post_init__(self):
        s = np.asarray(self.s)
        if np.any((s < MASK) | (s >= self.K)):
            raise ShapeError(f"token ids must be in [0, {self.K}) or MASK")
        self.s = s


def quantize(z: np.ndarray, codebook: Codebook) -> tuple[np.ndarray, TokenGrid]:
    """Replace each (d,)-cell of a (d, h, w) activation map by its nearest
    code; returns (z_q, token grid)."""
    z = np.asarray(z)
    if z.ndim == 2:
        z = z[:, None, :]
    d, h, w = z.shape
    if d != codebook.d:
        raise ShapeError(f"activation depth {d} != codebook dim {codebook.d}")
    flat = z.transpose(1, 2, 0).reshape(-1, d)
    ids = codebook.nearest(flat)
    zq = codebook.vectors[ids].astype(z.dtype).reshape(h, w, d).transpose(2, 0, 1)
    return zq, TokenGrid(s=ids.reshape(h, w), K=codebook.K)


def straight_through(z: Tensor, codebook: Codebook) -> tuple[Tensor, np.ndarray]:
    """Batch quantization (B, d, w) with the straight-through gradient:
    the backward pass treats quantization as identity."""
    b, d, w = z.shape
    flat = z.data.transpose(0, 2, 1).reshape(-1, d)
    ids = codebook.nearest(flat)
    zq_data = codebook.vectors[ids].astype(z.data.dtype).reshape(b, w, d).transpose(0, 2, 1)
    zq = z + Tensor(zq_data - z.data)
    return zq, ids.reshape(b, w)


# -- stage 1 ------------------------------------------------------------------


class BranchAutoencoder(nn.Module):
    """Encoder/decoder pair for one frequency band of the spectrogram."""

    def __init__(self, in_channels: int, cfg: VqvaeConfig, downsample: int,
                 rng: np.random.Generator):
        if downsample not in (2, 4):
            raise ShapeError(f"downsample must be 2 or 4, got {downsample}")
        c, d = cfg.hidden, cfg.d
        self.downsample = downsample
        enc = [nn.Conv1d(in_channels, c, 3, rng, stride=2), nn.ReLU()]
        if downsample == 4:
            enc += [nn.Conv1d(c, c, 3, rng, stride=2), nn.ReLU()]
        enc += [nn.Conv1d(c, d, 3, rng)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv1d(d, c, 3, rng), nn.ReLU()]
        for _ in range(1 if downsample == 2 else 2):
            dec += [UpsampleConv(c, c, rng)]
        dec += [nn.Conv1d(c, in_channels, 3, rng)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, spec: Tensor) -> Tensor:
        return self.encoder(spec)

    def decode(self, zq: Tensor, frames: int) -> Tensor:
        out = self.decoder(zq)
        return out[:, :, :frames]


class UpsampleConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = nn.Conv1d(c_in, c_out, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(nn.upsample_nearest(x, 2)).relu()


def batch_stft(signals: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """(n, leads, length) -> stacked spectra (n, leads, 2, bins, frames) with
    the same centered framing as ``dsp.stft``."""
    n, leads, length = signals.shape
    pad, n_frames, padded_len = dsp.stft_geometry(length, n_fft, hop)
    xp = np.zeros((n, leads, padded_len))
    xp[:, :, pad:pad + length] = signals
    starts = np.arange(n_frames) * hop
    frames = xp[:, :, starts[:, None] + np.arange(n_fft)]  # (n, leads, frames, n_fft)
    spec = np.fft.rfft(frames * dsp.hann_window(n_fft), axis=-1)
    out = np.stack([spec.real, spec.imag], axis=2)  # (n, leads, 2, frames, bins)
    return out.transpose(0, 1, 2, 4, 3).astype(np.float32)


def istft_tensor(spec: Tensor, n_fft: int, hop: int, out_len: int) -> Tensor:
    """Differentiable inverse of ``batch_stft`` for (n, leads, 2, bins, frames)."""
    window = dsp.hann_window(n_fft)
    pad, n_frames, padded_len = dsp.stft_geometry(out_len, n_fft, hop)
    if spec.shape[-1] != n_frames:
        raise ShapeError(f"expected {n_frames} frames for length {out_len}, "
                         f"got {spec.shape[-1]}")
    # (n, leads, frames, 2, bins) -> time frames -> windowed overlap-add
    stacked = spec.transpose((0, 1, 4, 2, 3))
    frames = nn.irfft_stack(stacked, n=n_fft)
    frames = frames * Tensor(window.astype(np.float32))
    acc = nn.overlap_add(frames, hop=hop, out_len=padded_len)
    wsum = np.zeros(padded_len)
    w2 = window * window
    for f in range(n_frames):
        wsum[f * hop:f * hop + n_fft] += w2
    wsum = np.maximum(wsum, 1e-10)
    acc = acc * Tensor((1.0 / wsum).astype(np.float32))
    return acc[:, :, pad:pad + out_len]


class Stage1(nn.Module):
    """Dual-branch quantized autoencoder over band-split spectrograms."""

    def __init__(self, cfg: VqvaeConfig, leads: int, length: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.leads = leads
        self.length = length
        bins = cfg.n_fft // 2 + 1
        self.bins = bins
        self.cutoff = cfg.resolved_cutoff()
        _, n_frames, _ = dsp.stft_geometry(length, cfg.n_fft, cfg.hop)
        self.n_frames = n_frames
        self.channels = leads * 2 * bins
        self.lf = BranchAutoencoder(self.channels, cfg, cfg.lf_downsample, rng)
        self.hf = BranchAutoencoder(self.channels, cfg, cfg.hf_downsample, rng)
        self.cb_lf = Codebook(cfg.K, cfg.d, seed=seed + 1, ema_decay=cfg.ema_decay)
        self.cb_hf = Codebook(cfg.K, cfg.d, seed=seed + 2, ema_decay=cfg.ema_decay)
        self.norm_mean = np.zeros(leads, dtype=np.float32)
        self.norm_std = np.ones(leads, dtype=np.float32)
        self.frozen = False
        self.w_lf = -(-n_frames // cfg.lf_downsample)
        self.w_hf = -(-n_frames // cfg.hf_downsample)
        # band masks over the stacked (2, bins, frames) representation
        lf_mask = np.zeros((1, 1, 2, bins, 1), dtype=np.float32)
        lf_mask[:, :, :, :self.cutoff] = 1.0
        self._lf_mask = lf_mask
        self._hf_mask = 1.0 - lf_mask

    def arch(self) -> str:
        c = self.cfg
        return (f"vqvae1-K{c.K}-d{c.d}-fft{c.n_fft}h{c.hop}-cut{self.cutoff}"
                f"-ds{c.lf_downsample}x{c.hf_downsample}-leads{self.leads}-len{self.length}")

    def _stacked_to_channels(self, spec: np.ndarray) -> np.ndarray:
        n = spec.shape[0]
        return spec.reshape(n, self.channels, self.n_frames)

    def _channels_to_stacked(self, t: Tensor) -> Tensor:
        n = t.shape[0]
        return t.reshape(n, self.leads, 2, self.bins, self.n_frames)

    def band_spectra(self, signals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        spec = batch_stft(signals, self.cfg.n_fft, self.cfg.hop)
        return spec * self._lf_mask, spec * self._hf_mask

    def encode_tokens(self, signals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic token grids (n, w_lf), (n, w_hf) for real signals."""
        lf_spec, hf_spec = self.band_spectra(self._normalize(signals))
        z_lf = self.lf.encode(Tensor(self._stacked_to_channels(lf_spec)))
        z_hf = self.hf.encode(Tensor(self._stacked_to_channels(hf_spec)))
        _, ids_lf = straight_through(z_lf, self.cb_lf)
        _, ids_hf = straight_through(z_hf, self.cb_hf)
        return ids_lf, ids_hf

    def decode_tokens(self, ids_lf: np.ndarray, ids_hf: np.ndarray) -> np.ndarray:
        """Token grids -> decoders -> band zero-padding -> ISTFT -> sum (mV)."""
        zq_lf = self.cb_lf.vectors[ids_lf].transpose(0, 2, 1)
        zq_hf = self.cb_hf.vectors[ids_hf].transpose(0, 2, 1)
        x_lf = self._decode_branch(Tensor(zq_lf), self.lf, self._lf_mask)
        x_hf = self._decode_branch(Tensor(zq_hf), self.hf, self._hf_mask)
        return self._denormalize((x_lf + x_hf).data.astype(np.float64))

    def _decode_branch(self, zq: Tensor, branch: BranchAutoencoder,
                       mask: np.ndarray) -> Tensor:
        out = branch.decode(zq, self.n_frames)
        spec = self._channels_to_stacked(out) * Tensor(mask.astype(np.float32))
        return istft_tensor(spec, self.cfg.n_fft, self.cfg.hop, self.length)

    def _normalize(self, signals: np.ndarray) -> np.ndarray:
        return ((signals - self.norm_mean[:, None]) / self.norm_std[:, None]
                ).astype(np.float32)

    def _denormalize(self, signals: np.ndarray) -> np.ndarray:
        return signals * self.norm_std[:, None] + self.norm_mean[:, None]

    def reconstruction_step(self, signals: np.ndarray,
                            update_codebooks: bool = True,
                            ) -> tuple[Tensor, np.ndarray]:
        """Loss = time-domain reconstruction MSE (branches summed) plus the
        commitment terms; codebooks move by EMA, not gradient."""
        x = self._normalize(signals)
        lf_spec, hf_spec = self.band_spectra(x)
        target = Tensor(x)
        commit_total = None
        recon_total = None
        for spec, branch, cb, mask in ((lf_spec, self.lf, self.cb_lf, self._lf_mask),
                                       (hf_spec, self.hf, self.cb_hf, self._hf_mask)):
            z = branch.encode(Tensor(self._stacked_to_channels(spec)))
            if not cb._initialized and update_codebooks:
                cb.init_from(z.data.transpose(0, 2, 1))
            zq, ids = straight_through(z, cb)
            if update_codebooks:
                cb.ema_update(z.data.transpose(0, 2, 1).reshape(-1, cb.d), ids.ravel())
            commit = nn.mse(z, Tensor(zq.data))  # ||z - sg(z_q)||^2
            commit_total = commit if commit_total is None else commit_total + commit
            xhat = self._decode_branch(zq, branch, mask)
            recon_total = xhat if recon_total is None else recon_total + xhat
        loss = nn.mse(recon_total, target) + self.cfg.commitment * commit_total
        return loss, recon_total.data

    def reconstruct(self, signals: np.ndarray) -> np.ndarray:
        ids_lf, ids_hf = self.encode_tokens(signals)
        return self.decode_tokens(ids_lf, ids_hf)

    def freeze(self) -> "Stage1":
        for p in self.params():
            p.frozen = True
        self.frozen = True
        return self


def stage1_train(ds: Dataset, cfg: VqvaeConfig, seed: int = 0,
                 log_every: int = 0) -> tuple[Stage1, dict]:
    """Joint training of both branches; warns on codebook collapse."""
    model = Stage1(cfg, ds.leads, ds.samples, seed=seed)
    x = ds.signals_array(dtype=np.float64)
    model.norm_mean = x.mean(axis=(0, 2)).astype(np.float32)
    model.norm_std = np.maximum(x.std(axis=(0, 2)), 1e-6).astype(np.float32)
    rng = np.random.default_rng(seed)
    opt = nn.Adam(model.params(), lr=cfg.stage1_lr)
    history = {"loss": [], "seconds": 0.0}
    t0 = time.perf_counter()
    for step in range(cfg.stage1_steps):
        idx = rng.integers(0, len(x), size=min(cfg.stage1_batch, len(x)))
        loss, _ = model.reconstruction_step(x[idx])
        model.zero_grads()
        loss.backward()
        opt.step()
        history["loss"].append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"  vqvae stage1 {step + 1}/{cfg.stage1_steps} "
                  f"loss {np.mean(history['loss'][-log_every:]):.4f}", flush=True)
    history["seconds"] = time.perf_counter() - t0
    for name, cb in (("LF", model.cb_lf), ("HF", model.cb_hf)):
        live = int((cb.usage > 0).sum())
        if live <= 1:
            warnings.warn(f"{name} codebook collapsed: usage histogram "
                          f"{np.sort(cb.usage)[-5:][::-1].tolist()} (top 5)")
    return model, history


# -- stage 2 ------------------------------------------------------------------


class FeedForward(nn.Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = nn.Dense(dim, 2 * dim, rng)
        self.fc2 = nn.Dense(2 * dim, dim, rng)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(x + self.fc2(self.fc1(x).relu()))


class MaskedPrior(nn.Module):
    """Bidirectional transformer over [class | context tokens | target tokens];
    predicts code logits at every target position."""

    def __init__(self, K: int, ctx_len: int, out_len: int, cfg: VqvaeConfig,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.K = K
        self.ctx_len = ctx_len
        self.out_len = out_len
        d = cfg.d_model
        self.token_emb = nn.Embedding(K + 1, d, rng)  # row K is the MASK token
        self.class_emb = nn.Embedding(cfg.n_classes, d, rng)
        self.pos = nn.Param((rng.standard_normal((1 + ctx_len + out_len, d)) * 0.02
                             ).astype(np.float32), name="pos")
        self.blocks = []
        for _ in range(cfg.n_prior_layers):
            self.blocks.append(nn.MultiheadSelfAttention(d, cfg.n_heads, rng))
            self.blocks.append(FeedForward(d, rng))
        self.out = nn.Dense(d, K, rng)

    def arch(self) -> str:
        return f"maskprior-K{self.K}-ctx{self.ctx_len}-out{self.out_len}"

    def forward(self, ctx: np.ndarray | None, tokens: np.ndarray,
                labels: np.ndarray) -> Tensor:
        ids = tokens if ctx is None else np.concatenate([ctx, tokens], axis=1)
        if ids.shape[1] != self.ctx_len + self.out_len:
            raise ShapeError(f"expected {self.ctx_len}+{self.out_len} tokens, "
                             f"got {ids.shape[1]}")
        ids = np.where(ids == MASK, self.K, ids)
        h = self.token_emb(ids)
        cls = self.class_emb(labels).reshape(len(labels), 1, -1)
        h = nn.concatenate([cls, h], axis=1) + self.pos
        for block in self.blocks:
            h = block(h)
        return self.out(h[:, 1 + self.ctx_len:, :])


def masked_cross_entropy(logits: Tensor, targets: np.ndarray,
                         mask: np.ndarray) -> Tensor:
    """Cross-entropy restricted to masked positions; 0 when nothing is masked."""
    flat_mask = mask.reshape(-1)
    picked = np.nonzero(flat_mask)[0]
    if picked.size == 0:
        return Tensor(np.float32(0.0))
    b, w, k = logits.shape
    flat = logits.reshape(b * w, k)[picked]
    return nn.cross_entropy(flat, targets.reshape(-1)[picked])


def _sample_mask(shape: tuple[int, int], schedule: MaskSchedule,
                 rng: np.random.Generator) -> np.ndarray:
    """Per-example MaskGIT training mask: fraction gamma(u), u ~ U(0,1)."""
    b, w = shape
    mask = np.zeros((b, w), dtype=bool)
    for i in range(b):
        n_mask = int(np.ceil(schedule.gamma(rng.random()) * w))
        n_mask = min(max(n_mask, 1), w)
        mask[i, rng.choice(w, size=n_mask, replace=False)] = True
    return mask


def stage2_train(stage1: Stage1, ds: Dataset, cfg: VqvaeConfig, seed: int = 0,
                 log_every: int = 0) -> tuple[MaskedPrior, MaskedPrior, dict]:
    """Masked-token training of the LF prior and the LF-conditioned HF prior."""
    if not stage1.frozen:
        raise StateError("stage 1 must be frozen before stage 2 training")
    ids_lf, ids_hf = stage1.encode_tokens(ds.signals_array(dtype=np.float64))
    labels = ds.labels_array()
    prior_lf = MaskedPrior(cfg.K, 0, stage1.w_lf, cfg, seed=seed + 11)
    prior_hf = MaskedPrior(cfg.K, stage1.w_lf, stage1.w_hf, cfg, seed=seed + 13)
    schedule = MaskSchedule(cfg.T_dec, cfg.temp_start, cfg.temp_end)
    rng = np.random.default_rng(seed)
    opt = nn.Adam(prior_lf.params() + prior_hf.params(), lr=cfg.stage2_lr)
    history = {"loss_lf": [], "loss_hf": [], "seconds": 0.0}
    t0 = time.perf_counter()
    for step in range(cfg.stage2_steps):
        idx = rng.integers(0, len(labels), size=min(cfg.stage2_batch, len(labels)))
        lf, hf, lab = ids_lf[idx], ids_hf[idx], labels[idx]
        m_lf = _sample_mask(lf.shape, schedule, rng)
        m_hf = _sample_mask(hf.shape, schedule, rng)
        loss_lf = masked_cross_entropy(
            prior_lf(None, np.where(m_lf, MASK, lf), lab), lf, m_lf)
        loss_hf = masked_cross_entropy(
            prior_hf(lf, np.where(m_hf, MASK, hf), lab), hf, m_hf)
        loss = loss_lf + loss_hf
        prior_lf.zero_grads()
        prior_hf.zero_grads()
        loss.backward()
        opt.step()
        history["loss_lf"].append(loss_lf.item())
        history["loss_hf"].append(loss_hf.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"  vqvae stage2 {step + 1}/{cfg.stage2_steps} "
                  f"lf {np.mean(history['loss_lf'][-log_every:]):.3f} "
                  f"hf {np.mean(history['loss_hf'][-log_every:]):.3f}", flush=True)
    history["seconds"] = time.perf_counter() - t0
    return prior_lf, prior_hf, history


def iterative_decode(prior: MaskedPrior, schedule: MaskSchedule,
                     labels: np.ndarray, seed: int = 0,
                     ctx: np.ndarray | None = None) -> np.ndarray:
    """Parallel confidence-based unmasking: after round t the number of MASK
    cells equals ceil(gamma(t/T_dec) * w); ties keep the lowest flat index."""
    rng = np.random.default_rng(seed)
    b = len(labels)
    w = prior.out_len
    tokens = np.full((b, w), MASK, dtype=np.int64)
    prior.eval_mode()
    for t in range(1, schedule.T_dec + 1):
        masked = tokens == MASK
        if not masked.any():
            break
        logits = prior(ctx, tokens, labels).data.astype(np.float64)
        temp = max(schedule.temperature(t), 1e-6)
        probs = nn.softmax_probs(logits / temp)
        # vectorized categorical draw by inverse CDF
        cum = probs.cumsum(axis=-1)
        cum /= cum[..., -1:]
        u = rng.random((b, w, 1))
        draws = (u > cum).sum(axis=-1)
        conf = probs[np.arange(b)[:, None], np.arange(w)[None, :], draws]
        target_remaining = schedule.masks_remaining(t, w)
        for i in range(b):
            cells = np.nonzero(masked[i])[0]
            keep_n = max(len(cells) - target_remaining, 0)
            if keep_n == 0:
                continue
            order = sorted(cells, key=lambda j: (-conf[i, j], j))
            chosen = order[:keep_n]
            tokens[i, chosen] = draws[i, chosen]
    tokens[tokens == MASK] = 0  # T_dec guarantees zero masks; belt and braces
    prior.train_mode()
    return tokens


class VqvaeGenerator:
    """Bundled two-stage model with the sampling path and persistence."""

    def __init__(self, stage1: Stage1, prior_lf: MaskedPrior, prior_hf: MaskedPrior,
                 cfg: VqvaeConfig):
        self.stage1 = stage1
        self.prior_lf = prior_lf
        self.prior_hf = prior_hf
        self.cfg = cfg

    @classmethod
    def train(cls, ds: Dataset, cfg: VqvaeConfig, seed: int = 0,
              log_every: int = 0) -> tuple["VqvaeGenerator", dict]:
        stage1, h1 = stage1_train(ds, cfg, seed=seed, log_every=log_every)
        stage1.freeze()
        prior_lf, prior_hf, h2 = stage2_train(stage1, ds, cfg, seed=seed,
                                              log_every=log_every)
        return cls(stage1, prior_lf, prior_hf, cfg), {"stage1": h1, "stage2": h2}

    def sample(self, label: RhythmClass, n: int, seed: int = 0) -> np.ndarray:
        if n == 0:
            return np.zeros((0, self.stage1.leads, self.stage1.length))
        schedule = MaskSchedule(self.cfg.T_dec, self.cfg.temp_start, self.cfg.temp_end)
        labels = np.full(n, int(label))
        ids_lf = iterative_decode(self.prior_lf, schedule, labels, seed=seed)
        ids_hf = iterative_decode(self.prior_hf, schedule, labels, seed=seed + 1,
                                  ctx=ids_lf)
        return self.stage1.decode_tokens(ids_lf, ids_hf)

    def synthesize_dataset(self, per_class: dict[RhythmClass, int], fs: float,
                           seed: int = 0, tag: str = "vqvae") -> Dataset:
        records = []
        for cls in sorted(per_class, key=int):
            signals = self.sample(cls, per_class[cls], seed=seed + int(cls))
            for i, sig in enumerate(signals):
                records.append(EcgRecord(
                    signal=sig, fs=fs, label=cls,
                    record_id=f"syn-{tag}-{cls.code}-{seed}-{i}",
                    source=Source.SYNTHETIC))
        return Dataset(records=records)

    def arch(self) -> str:
        return self.stage1.arch() + "+priors"

    def save(self, path) -> None:
        arrays = {}
        for prefix, module in (("s1", self.stage1), ("plf", self.prior_lf),
                               ("phf", self.prior_hf)):
            for name, p in module.named_params():
                arrays[f"{prefix}/{name}"] = p.data
        arrays["cb/lf"] = self.stage1.cb_lf.vectors
        arrays["cb/hf"] = self.stage1.cb_hf.vectors
        arrays["_norm/mean"] = self.stage1.norm_mean
        arrays["_norm/std"] = self.stage1.norm_std
        meta = {"leads": self.stage1.leads, "length": self.stage1.length}
        nn.save_arrays(path, arrays, arch=self.arch(), meta=meta)

    @classmethod
    def load(cls, path, cfg: VqvaeConfig, leads: int, length: int) -> "VqvaeGenerator":
        arrays, meta = nn.load_arrays(path)
        stage1 = Stage1(cfg, leads, length)
        gen = cls(stage1, MaskedPrior(cfg.K, 0, stage1.w_lf, cfg),
                  MaskedPrior(cfg.K, stage1.w_lf, stage1.w_hf, cfg), cfg)
        if meta.get("arch") != gen.arch():
            from .errors import VersionError
            raise VersionError(f"checkpoint arch {meta.get('arch')!r} != {gen.arch()!r}")
        for prefix, module in (("s1", stage1), ("plf", gen.prior_lf),
                               ("phf", gen.prior_hf)):
            module.load_state_arrays(
                {name[len(prefix) + 1:]: arr for name, arr in arrays.items()
                 if name.startswith(prefix + "/")
                 and not name.startswith(("cb/", "_norm/"))})
        stage1.cb_lf.vectors = arrays["cb/lf"]
        stage1.cb_hf.vectors = arrays["cb/hf"]
        stage1.norm_mean = arrays["_norm/mean"]
        stage1.norm_std = arrays["_norm/std"]
        stage1.freeze()
        return gen
