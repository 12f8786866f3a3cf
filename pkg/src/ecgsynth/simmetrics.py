"""Distribution-level similarity between real and synthetic datasets:
kernel MMD, the 2-sample classification test, and embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import ClassifierConfig, ResidualCnn
from .errors import SampleSizeError, SchemaError
from . import nn
from .nn.tensor import Tensor
from .records import Dataset


@dataclass(frozen=True)
class MmdResult:
    value: float        # biased (V-statistic) MMD^2, always >= 0
    bandwidth: float
    n: int
    m: int
    degenerate: bool = False


@dataclass(frozen=True)
class TwoSampleResult:
    accuracy: float
    n_real: int
    n_synth: int


def _flatten(ds: Dataset | np.ndarray) -> np.ndarray:
    if isinstance(ds, Dataset):
        arr = ds.signals_array(dtype=np.float64)
    else:
        arr = np.asarray(ds, dtype=np.float64)
    return arr.reshape(len(arr), int(np.prod(arr.shape[1:], dtype=np.int64)))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d2, 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    z = np.concatenate([x, y])
    d2 = _sq_dists(z, z)
    upper = d2[np.triu_indices(len(z), k=1)]
    return float(np.sqrt(np.median(upper)))


def mmd_rbf(X: Dataset | np.ndarray, Y: Dataset | np.ndarray,
            bandwidth: float | None = None) -> MmdResult:
    """Biased MMD^2 with k(a, b) = exp(-||a-b||^2 / (2 sigma^2)).

    Bandwidth defaults to the median heuristic over the pooled sample; if
    every pooled point is identical the result is flagged degenerate with
    value 0.
    """
    x, y = _flatten(X), _flatten(Y)
    if len(x) == 0 or len(y) == 0:
        raise SampleSizeError("mmd_rbf needs non-empty datasets")
    if x.shape[1] != y.shape[1]:
        raise SchemaError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    degenerate = False
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
        if bandwidth == 0.0:
            return MmdResult(value=0.0, bandwidth=0.0, n=len(x), m=len(y),
                             degenerate=True)
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-gamma * _sq_dists(x, x)).mean()
    kyy = np.exp(-gamma * _sq_dists(y, y)).mean()
    kxy = np.exp(-gamma * _sq_dists(x, y)).mean()
    value = float(max(kxx + kyy - 2.0 * kxy, 0.0))
    return MmdResult(value=value, bandwidth=float(bandwidth), n=len(x), m=len(y),
                     degenerate=degenerate)


def mmd_rbf_oracle(x: np.ndarray, y: np.ndarray, bandwidth: float) -> float:
    """Brute-force triple-sum reference (test oracle; O(n^2 d) loops)."""
    def k(a, b):
        return np.exp(-np.sum((a - b) ** 2) / (2 * bandwidth ** 2))

    n, m = len(x), len(y)
    sxx = sum(k(a, b) for a in x for b in x) / (n * n)
    syy = sum(k(a, b) for a in y for b in y) / (m * m)
    sxy = sum(k(a, b) for a in x for b in y) / (n * m)
    return sxx + syy - 2 * sxy


def default_discriminator_config() -> ClassifierConfig:
    """Deliberately weak discriminator: biases toward 0.5 under the null."""
    return ClassifierConfig(n_conv_blocks=2, n_kernels=8, kernel_len=7,
                            n_neurons=16, n_dense_layers=1, lr=1e-3, dropout=0.1,
                            patience=3, n_classes=2, batch_size=32, max_epochs=12)


def _train_binary(real_x: np.ndarray, synth_x: np.ndarray, cfg: ClassifierConfig,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train real-vs-synth on a stratified split; returns (predictions, truth)
    on the held-out quarter."""
    rng = np.random.default_rng(seed)
    split_parts = []
    for x, label in ((real_x, 0), (synth_x, 1)):
        order = rng.permutation(len(x))
        cut = int(round(0.75 * len(x)))
        split_parts.append((x[order[:cut]], x[order[cut:]], label))
    train_x = np.concatenate([p[0] for p in split_parts])
    train_y = np.concatenate([np.full(len(p[0]), p[2]) for p in split_parts])
    test_x = np.concatenate([p[1] for p in split_parts])
    test_y = np.concatenate([np.full(len(p[1]), p[2]) for p in split_parts])

    model = ResidualCnn(cfg, leads=train_x.shape[1], length=train_x.shape[2],
                        seed=seed)
    opt = nn.Adam(model.params(), lr=cfg.lr)
    x32 = train_x.astype(np.float32)
    for _ in range(cfg.max_epochs):
        order = rng.permutation(len(x32))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = nn.cross_entropy(model.forward(Tensor(x32[idx])), train_y[idx])
            model.zero_grads()
            loss.backward()
            opt.step()
    probs = model.predict_proba(test_x.astype(np.float32))
    return probs.argmax(axis=1), test_y


def two_sample_score(real: Dataset, synth: Dataset,
                     cfg: ClassifierConfig | None = None,
                     seed: int = 0) -> TwoSampleResult:
    """Held-out accuracy of a real-vs-synthetic discriminator.

    0.5 means the sets are indistinguishable to this model family; 1.0 means
    fully separable.
    """
    if len(real) < 8 or len(synth) < 8:
        raise SampleSizeError(
            f"need >= 8 records per side, got {len(real)} real / {len(synth)} synthetic")
    real_x = real.signals_array(dtype=np.float64)
    synth_x = synth.signals_array(dtype=np.float64)
    if real_x.shape[1:] != synth_x.shape[1:]:
        raise SchemaError(f"shape mismatch: {real_x.shape[1:]} vs {synth_x.shape[1:]}")
    cfg = cfg or default_discriminator_config()
    pred, truth = _train_binary(real_x, synth_x, cfg, seed)
    return TwoSampleResult(accuracy=float((pred == truth).mean()),
                           n_real=len(real), n_synth=len(synth))


# -- embeddings ----------------------------------------------------------------


def pca_fit(x: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigen-decomposition of the covariance; returns (components, mean,
    explained variances), components as columns sorted by decreasing variance."""
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    return vecs[:, order], mean, np.maximum(vals[order], 0.0)


def pca_transform(x: np.ndarray, components: np.ndarray, mean: np.ndarray) -> np.ndarray:
    return (x - mean) @ components


def export_embeddings(ds_real: Dataset, ds_synth: Dataset, out_path,
                      n_components: int | None = 50) -> Path:
    """CSV of per-record vectors (origin, class, features...), PCA-reduced to
    ``n_components`` over the pooled data; pass None to keep raw flattening.
    Consumable by external projection tools."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    x_real, x_synth = _flatten(ds_real), _flatten(ds_synth)
    pooled = np.concatenate([x_real, x_synth])
    if n_components is not None and n_components < pooled.shape[1]:
        comps, mean, _ = pca_fit(pooled, n_components)
        x_real = pca_transform(x_real, comps, mean)
        x_synth = pca_transform(x_synth, comps, mean)
    width = x_real.shape[1]
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "class"] + [f"f{i}" for i in range(width)])
        for origin, ds, x in (("real", ds_real, x_real), ("synth", ds_synth, x_synth)):
            for rec, row in zip(ds.records, x):
                writer.writerow([origin, rec.label.code] +
                                [f"{v:.8g}" for v in row])
    return out_path
