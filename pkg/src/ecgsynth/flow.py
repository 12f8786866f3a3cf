"""Exact-likelihood normalizing flow in the cropped frequency domain.

Layer 0 is the fixed frequency transform (zero-pad, DFT, crop to N/2 complex
bins, packed as an N-vector); after it, M affine coupling layers alternate
even/odd parity. Each lead is transformed independently with shared
parameters, and one flow is trained per rhythm class.

Log-likelihoods are densities over the spectral representation: the constant
Jacobian of the fixed layer-0 map (and of the optional spectral rescaling) is
not included, which leaves training gradients and model comparisons on the
same data unchanged.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import dsp, nn
from .errors import NumericError, ShapeError
from .nn.tensor import Tensor
from .records import Dataset, EcgRecord, RhythmClass, Source

LOG_2PI = math.log(2.0 * math.pi)


def clip_tensor(x: Tensor, lo: float, hi: float) -> Tensor:
    """Differentiable hard clamp: identity inside [lo, hi], flat outside."""
    return (x - lo).relu() - (x - hi).relu() + lo


@dataclass
class FlowConfig:
    n_couplings: int = 6
    hidden: int = 64
    scale_clamp: float = 5.0
    n_pad: int | None = None          # default: smallest even N >= length
    spectral_scale: float | None = None  # default 1/sqrt(N) to keep inputs O(1)
    lr: float = 1e-3
    steps: int = 300
    batch_size: int = 8
    n_classes: int = 7

    def resolved_pad(self, length: int) -> int:
        n = self.n_pad if self.n_pad is not None else length + (length % 2)
        if n < length or n % 2:
            raise ShapeError(f"pad length {n} invalid for series length {length}")
        return n


class CouplingLayer(nn.Module):
    """Affine coupling: the ``parity`` half is rescaled and shifted by a
    2-layer dense transfer network fed only the untouched half."""

    def __init__(self, n_dim: int, parity: int, hidden: int, clamp: float,
                 rng: np.random.Generator, dtype=np.float64):
        if n_dim % 2:
            raise ShapeError(f"coupling input dim must be even, got {n_dim}")
        half = n_dim // 2
        self.parity = parity
        self.clamp = clamp
        self.fc1 = nn.Dense(half, hidden, rng, dtype=dtype)
        self.fc2 = nn.Dense(hidden, 2 * half, rng, dtype=dtype)
        # start near the identity map: zero scale/shift at initialization
        self.fc2.weight.data[:] = 0.0

    def _transfer(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        h = self.fc2(self.fc1(cond).relu())
        half = h.shape[-1] // 2
        s = clip_tensor(h[:, :half], -self.clamp, self.clamp)
        t = h[:, half:]
        return s, t

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        moved = x[:, self.parity::2]
        cond = x[:, 1 - self.parity::2]
        return moved, cond

    def _join(self, moved: Tensor, cond: Tensor) -> Tensor:
        if self.parity == 0:
            pair = nn.stack([moved, cond], axis=-1)
        else:
            pair = nn.stack([cond, moved], axis=-1)
        return pair.reshape(pair.shape[0], -1)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x -> (y, log|det J|) with log|det| = sum of log-scales."""
        moved, cond = self._split(x)
        s, t = self._transfer(cond)
        y = self._join(moved * s.exp() + t, cond)
        return y, s.sum(axis=-1)

    def inverse(self, y: Tensor) -> Tensor:
        moved, cond = self._split(y)
        s, t = self._transfer(cond)
        return self._join((moved - t) * (-s).exp(), cond)


class FlowStack:
    """Fixed frequency-transform front end plus alternating couplings."""

    def __init__(self, length: int, cfg: FlowConfig, seed: int = 0):
        self.length = length
        self.cfg = cfg
        self.n_pad = cfg.resolved_pad(length)
        self.scale = (cfg.spectral_scale if cfg.spectral_scale is not None
                      else 1.0 / math.sqrt(self.n_pad))
        rng = np.random.default_rng(seed)
        self.couplings = [
            CouplingLayer(self.n_pad, parity=i % 2, hidden=cfg.hidden,
                          clamp=cfg.scale_clamp, rng=rng)
            for i in range(cfg.n_couplings)
        ]

    def params(self) -> list[nn.Param]:
        out = []
        for c in self.couplings:
            out.extend(c.params())
        return out

    def named_params(self):
        out = []
        for i, c in enumerate(self.couplings):
            out.extend((f"c{i}.{n}", p) for n, p in c.named_params())
        return out

    def arch(self) -> str:
        return (f"fourierflow-M{self.cfg.n_couplings}-h{self.cfg.hidden}"
                f"-N{self.n_pad}-len{self.length}")

    # -- fixed spectral front end -------------------------------------------

    def spectral(self, rows: np.ndarray) -> np.ndarray:
        """(rows, length) time series -> (rows, N) packed spectral vectors."""
        sv = dsp.frequency_transform(rows, self.n_pad)
        return np.concatenate([sv.re, sv.im], axis=-1) * self.scale

    def inverse_spectral(self, vec: np.ndarray) -> np.ndarray:
        half = self.n_pad // 2
        vec = vec / self.scale
        sv = dsp.SpectralVector(re=vec[..., :half], im=vec[..., half:],
                                n_pad=self.n_pad, orig_len=self.length)
        return dsp.inverse_frequency_transform(sv)

    # -- flow passes ----------------------------------------------------------

    def transform(self, rows: np.ndarray) -> tuple[Tensor, Tensor]:
        """f(x): returns (z, total log|det|) for (rows, length) input."""
        h = Tensor(self.spectral(rows))
        total = Tensor(np.zeros(h.shape[0]))
        for i, c in enumerate(self.couplings):
            h, ld = c(h)
            if not np.all(np.isfinite(h.data)):
                raise NumericError(f"non-finite activations in coupling layer {i}")
            total = total + ld
        return h, total

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        h = Tensor(np.asarray(z, dtype=np.float64))
        for c in reversed(self.couplings):
            h = c.inverse(h)
        return self.inverse_spectral(h.data)

    def log_likelihood_rows(self, rows: np.ndarray) -> np.ndarray:
        z, logdet = self.transform(rows)
        base = -0.5 * (z.data ** 2 + LOG_2PI).sum(axis=-1)
        return base + logdet.data

    def loss(self, rows: np.ndarray) -> Tensor:
        """Negative mean log-likelihood per spectral dimension."""
        z, logdet = self.transform(rows)
        base = (z * z).sum(axis=-1) * 0.5 + 0.5 * LOG_2PI * z.shape[-1]
        nll = base - logdet
        return nll.mean() / z.shape[-1]

    def sample_rows(self, n_rows: int, seed: int = 0) -> np.ndarray:
        z = np.random.default_rng(seed).standard_normal((n_rows, self.n_pad))
        out = self.inverse_transform(z)
        if not np.all(np.isfinite(out)):
            raise NumericError("flow produced non-finite samples (undertrained?)")
        return out


def flow_sample(flow: FlowStack, n: int, seed: int = 0) -> np.ndarray:
    """Draw ``n`` series from the base Gaussian through the inverse flow."""
    if n == 0:
        return np.zeros((0, flow.length))
    return flow.sample_rows(n, seed=seed)


def log_likelihood(signal: np.ndarray, flow: FlowStack) -> float:
    """Sum of per-lead spectral log-densities for one (leads, length) signal."""
    rows = np.asarray(signal, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    return float(flow.log_likelihood_rows(rows).sum())


def flow_train(rows: np.ndarray, cfg: FlowConfig, seed: int = 0,
               log_every: int = 0) -> tuple[FlowStack, dict]:
    """Maximize mean log-likelihood over (rows, length) series."""
    flow = FlowStack(rows.shape[-1], cfg, seed=seed)
    rng = np.random.default_rng(seed)
    opt = nn.Adam(flow.params(), lr=cfg.lr)
    history = {"nll": [], "best_nll": [], "seconds": 0.0}
    best = np.inf
    last_good = {n: p.data.copy() for n, p in flow.named_params()}
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(rows), size=min(cfg.batch_size, len(rows)))
        loss = flow.loss(rows[idx])
        if not np.isfinite(loss.data):
            for n, p in flow.named_params():
                p.data = last_good[n].copy()
            raise NumericError(
                f"flow training diverged at step {step}; params restored to last "
                f"finite state (best nll {best:.4f})")
        for p in flow.params():
            p.grad = None
        loss.backward()
        opt.step()
        val = loss.item()
        history["nll"].append(val)
        if val < best:
            best = val
            last_good = {n: p.data.copy() for n, p in flow.named_params()}
        history["best_nll"].append(best)
        if log_every and (step + 1) % log_every == 0:
            print(f"  flow step {step + 1}/{cfg.steps} nll/dim "
                  f"{np.mean(history['nll'][-log_every:]):.4f}", flush=True)
    history["seconds"] = time.perf_counter() - t0
    return flow, history


class FlowFamily:
    """One flow per rhythm class over a shared record geometry."""

    def __init__(self, cfg: FlowConfig, leads: int, length: int):
        self.cfg = cfg
        self.leads = leads
        self.length = length
        self.flows: dict[RhythmClass, FlowStack] = {}
        self.norm_mean = np.zeros(leads)
        self.norm_std = np.ones(leads)

    def arch(self) -> str:
        probe = FlowStack(self.length, self.cfg)
        return probe.arch() + f"-leads{self.leads}-perclass"

    def _normalize(self, signals: np.ndarray) -> np.ndarray:
        return (signals - self.norm_mean[:, None]) / self.norm_std[:, None]

    def _denormalize(self, signals: np.ndarray) -> np.ndarray:
        return signals * self.norm_std[:, None] + self.norm_mean[:, None]

    def train(self, ds: Dataset, seed: int = 0, log_every: int = 0) -> dict:
        x = ds.signals_array(dtype=np.float64)
        self.norm_mean = x.mean(axis=(0, 2))
        self.norm_std = np.maximum(x.std(axis=(0, 2)), 1e-6)
        histories = {}
        for cls, recs in sorted(ds.by_class().items(), key=lambda kv: int(kv[0])):
            sig = np.stack([r.signal for r in recs])
            rows = self._normalize(sig).reshape(-1, self.length)
            flow, hist = flow_train(rows, self.cfg, seed=seed + int(cls),
                                    log_every=log_every)
            self.flows[cls] = flow
            histories[cls.code] = hist
        return histories

    def sample(self, label: RhythmClass, n: int, seed: int = 0) -> np.ndarray:
        if label not in self.flows:
            raise ShapeError(f"no trained flow for class {label.code}")
        if n == 0:
            return np.zeros((0, self.leads, self.length))
        rows = self.flows[label].sample_rows(n * self.leads, seed=seed)
        return self._denormalize(rows.reshape(n, self.leads, self.length))

    def synthesize_dataset(self, per_class: dict[RhythmClass, int], fs: float,
                           seed: int = 0, tag: str = "flow") -> Dataset:
        records = []
        for cls in sorted(per_class, key=int):
            signals = self.sample(cls, per_class[cls], seed=seed + int(cls))
            for i, sig in enumerate(signals):
                records.append(EcgRecord(
                    signal=sig, fs=fs, label=cls,
                    record_id=f"syn-{tag}-{cls.code}-{seed}-{i}",
                    source=Source.SYNTHETIC))
        return Dataset(records=records)

    def save(self, path) -> None:
        arrays = {"_norm/mean": self.norm_mean.astype(np.float32),
                  "_norm/std": self.norm_std.astype(np.float32)}
        for cls, flow in self.flows.items():
            for name, p in flow.named_params():
                arrays[f"{cls.code}/{name}"] = p.data
        meta = {"classes": sorted(c.code for c in self.flows),
                "leads": self.leads, "length": self.length}
        nn.save_arrays(path, arrays, arch=self.arch(), meta=meta)

    @classmethod
    def load(cls, path, cfg: FlowConfig, leads: int, length: int) -> "FlowFamily":
        arrays, meta = nn.load_arrays(path)
        fam = cls(cfg, leads, length)
        if meta.get("arch") != fam.arch():
            from .errors import VersionError
            raise VersionError(f"checkpoint arch {meta.get('arch')!r} != {fam.arch()!r}")
        fam.norm_mean = arrays["_norm/mean"].astype(np.float64)
        fam.norm_std = arrays["_norm/std"].astype(np.float64)
        for code in meta["classes"]:
            flow = FlowStack(length, cfg)
            prefix = f"{code}/"
            state = {n[len(prefix):]: a for n, a in arrays.items()
                     if n.startswith(prefix)}
            for name, p in flow.named_params():
                p.data = state[name].astype(np.float64)
            fam.flows[RhythmClass.from_code(code)] = flow
        return fam
