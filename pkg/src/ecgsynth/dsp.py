"""Deterministic spectral transforms: DFT, padded/cropped frequency vectors,
Hann-window STFT with overlap-add inversion, and LF/HF spectrogram splits.

All functions are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HopError, PadError, ShapeError


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT as separate real/imag arrays of shape (bins, frames)."""

    re: np.ndarray
    im: np.ndarray
    n_fft: int
    hop: int

    def __post_init__(self):
        bins = self.n_fft // 2 + 1
        if self.re.shape != self.im.shape or self.re.shape[0] != bins:
            raise ShapeError(
                f"spectrogram arrays must be ({bins}, frames), got {self.re.shape}/{self.im.shape}")

    @property
    def bins(self) -> int:
        return self.re.shape[0]

    @property
    def frames(self) -> int:
        return self.re.shape[1]

    def as_complex(self) -> np.ndarray:
        return self.re + 1j * self.im


@dataclass(frozen=True)
class SpectralVector:
    """Cropped half-spectrum of a zero-padded series.

    ``re`` holds Re of bins 0..N/2-1. ``im`` holds Im of the same bins,
    except slot 0: Im(DC) is identically zero for real input, so that slot
    stores the (real) Nyquist coefficient instead. The packing keeps exactly
    N/2 + N/2 coefficients while remaining exactly invertible.
    """

    re: np.ndarray
    im: np.ndarray
    n_pad: int
    orig_len: int

    def __post_init__(self):
        if self.re.shape != self.im.shape or self.re.shape[-1] != self.n_pad // 2:
            raise ShapeError(
                f"spectral vector arrays must have last dim {self.n_pad // 2}, "
                f"got {self.re.shape}/{self.im.shape}")


def dft(x: np.ndarray) -> np.ndarray:
    """Unnormalized DFT along the last axis; inverse is ``idft``."""
    return np.fft.fft(np.asarray(x), axis=-1)


def idft(coeffs: np.ndarray) -> np.ndarray:
    return np.fft.ifft(np.asarray(coeffs), axis=-1)


def frequency_transform(x: np.ndarray, n_pad: int) -> SpectralVector:
    """Zero-pad the series to ``n_pad``, transform, and crop to the first
    N/2 complex bins (Nyquist packed into the Im(DC) slot)."""
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-1]
    if n_pad < t:
        raise PadError(f"pad length {n_pad} shorter than series length {t}")
    if n_pad % 2 != 0:
        raise PadError(f"pad length must be even, got {n_pad}")
    pad_width = [(0, 0)] * (x.ndim - 1) + [(0, n_pad - t)]
    spec = np.fft.rfft(np.pad(x, pad_width), axis=-1)  # bins 0..N/2
    half = n_pad // 2
    re = spec.real[..., :half].copy()
    im = spec.imag[..., :half].copy()
    im[..., 0] = spec.real[..., half]  # Nyquist into the always-zero Im(DC) slot
    return SpectralVector(re=re, im=im, n_pad=n_pad, orig_len=t)


def inverse_frequency_transform(sv: SpectralVector, length: int | None = None) -> np.ndarray:
    """Rebuild the conjugate half from realness and crop to the original length."""
    length = sv.orig_len if length is None else length
    half = sv.n_pad // 2
    spec = np.empty(sv.re.shape[:-1] + (half + 1,), dtype=np.complex128)
    spec[..., :half] = sv.re + 1j * sv.im
    spec[..., 0] = sv.re[..., 0]          # DC is real
    spec[..., half] = sv.im[..., 0]       # unpack Nyquist
    out = np.fft.irfft(spec, n=sv.n_pad, axis=-1)
    return out[..., :length]


def hann_window(n_fft: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)


def stft_geometry(length: int, n_fft: int, hop: int) -> tuple[int, int, int]:
    """(pad, n_frames, padded_len) for centered framing that covers ``length``."""
    pad = n_fft // 2
    covered = length + 2 * pad
    n_frames = max(-(-(covered - n_fft) // hop), 0) + 1
    padded_len = (n_frames - 1) * hop + n_fft
    return pad, n_frames, padded_len


def _check_stft_args(n_fft: int, hop: int):
    if n_fft < 2 or (n_fft & (n_fft - 1)) != 0:
        raise ShapeError(f"n_fft must be a power of two >= 2, got {n_fft}")
    if hop > n_fft:
        raise HopError(f"hop {hop} exceeds window length {n_fft}")
    if hop < 1:
        raise HopError(f"hop must be >= 1, got {hop}")


def stft(x: np.ndarray, n_fft: int, hop: int) -> Spectrogram:
    """Hann-windowed STFT of a 1D series with centered zero-padded framing."""
    _check_stft_args(n_fft, hop)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"stft expects a 1D series, got shape {x.shape}")
    pad, n_frames, padded_len = stft_geometry(x.shape[0], n_fft, hop)
    xp = np.zeros(padded_len)
    xp[pad:pad + x.shape[0]] = x
    window = hann_window(n_fft)
    starts = np.arange(n_frames) * hop
    frames = xp[starts[:, None] + np.arange(n_fft)] * window
    spec = np.fft.rfft(frames, axis=-1).T  # (bins, frames)
    return Spectrogram(re=spec.real.copy(), im=spec.imag.copy(), n_fft=n_fft, hop=hop)


def istft(spec: Spectrogram, hop: int | None = None, out_len: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse with window-sum normalization.

    Exact (to float precision) wherever the squared-window coverage is
    non-degenerate; with centered framing and hop <= n_fft/2 that is every
    sample of the original series. At hop == n_fft the Hann window zeroes
    frame-boundary samples, which are then unrecoverable.
    """
    hop = spec.hop if hop is None else hop
    _check_stft_args(spec.n_fft, hop)
    n_fft = spec.n_fft
    window = hann_window(n_fft)
    frames = np.fft.irfft(spec.as_complex().T, n=n_fft, axis=-1) * window
    n_frames = frames.shape[0]
    padded_len = (n_frames - 1) * hop + n_fft
    acc = np.zeros(padded_len)
    wsum = np.zeros(padded_len)
    w2 = window * window
    for f in range(n_frames):
        acc[f * hop:f * hop + n_fft] += frames[f]
        wsum[f * hop:f * hop + n_fft] += w2
    good = wsum > 1e-10
    acc[good] /= wsum[good]
    acc[~good] = 0.0
    pad = n_fft // 2
    if out_len is None:
        return acc[pad:]
    return acc[pad:pad + out_len]


def split_lf_hf(spec: Spectrogram, cutoff_bin: int) -> tuple[Spectrogram, Spectrogram]:
    """Additive partition: LF keeps bins < cutoff, HF keeps bins >= cutoff."""
    if not 0 < cutoff_bin < spec.bins:
        raise ShapeError(f"cutoff_bin must be in (0, {spec.bins}), got {cutoff_bin}")
    lf_re, lf_im = spec.re.copy(), spec.im.copy()
    hf_re, hf_im = spec.re.copy(), spec.im.copy()
    lf_re[cutoff_bin:] = 0.0
    lf_im[cutoff_bin:] = 0.0
    hf_re[:cutoff_bin] = 0.0
    hf_im[:cutoff_bin] = 0.0
    lf = Spectrogram(re=lf_re, im=lf_im, n_fft=spec.n_fft, hop=spec.hop)
    hf = Spectrogram(re=hf_re, im=hf_im, n_fft=spec.n_fft, hop=spec.hop)
    return lf, hf
