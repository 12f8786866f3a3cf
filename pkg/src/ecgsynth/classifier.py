"""1D residual CNN rhythm classifier and classification metrics."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ShapeError
from .nn.tensor import Tensor
from .records import Dataset

N_CLASSES = 7


@dataclass
class ClassifierConfig:
    """Architecture and training knobs.

    The two reference configurations from the source datasets are provided
    as presets; ``desk()`` is a small variant for fixture-scale runs.
    """

    n_conv_blocks: int = 6
    n_kernels: int = 32
    kernel_len: int = 7
    n_neurons: int = 256
    n_dense_layers: int = 3
    lr: float = 0.000354
    dropout: float = 0.474333
    patience: int = 10
    min_delta: float = 0.00001
    n_classes: int = N_CLASSES
    batch_size: int = 32
    max_epochs: int = 100

    def __post_init__(self):
        counts = (self.n_conv_blocks, self.n_kernels, self.kernel_len,
                  self.n_neurons, self.n_dense_layers, self.n_classes)
        if any(c < 1 for c in counts):
            raise ShapeError(f"all architecture counts must be >= 1, got {counts}")
        if not 0 <= self.dropout < 1:
            raise ShapeError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ShapeError(f"lr must be positive, got {self.lr}")

    @classmethod
    def ptbxl(cls) -> "ClassifierConfig":
        return cls(n_conv_blocks=6, n_kernels=32, kernel_len=7, n_neurons=256,
                   n_dense_layers=3, lr=0.000354, dropout=0.474333)

    @classmethod
    def chapman(cls) -> "ClassifierConfig":
        return cls(n_conv_blocks=5, n_kernels=16, kernel_len=7, n_neurons=256,
                   n_dense_layers=3, lr=0.000158, dropout=0.377601)

    @classmethod
    def desk(cls) -> "ClassifierConfig":
        return cls(n_conv_blocks=2, n_kernels=12, kernel_len=11, n_neurons=48,
                   n_dense_layers=1, lr=0.0015, dropout=0.1, patience=8,
                   max_epochs=40, batch_size=64)


@dataclass
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    roc_auc_macro: float
    wall_time_s: float = 0.0

    def __post_init__(self):
        for name in ("accuracy", "precision_macro", "recall_macro", "f1_macro",
                     "roc_auc_macro"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ShapeError(f"{name}={v} outside [0, 1]")

    def values(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision_macro,
                "recall": self.recall_macro, "f1": self.f1_macro,
                "roc_auc": self.roc_auc_macro, "wall_time_s": self.wall_time_s}


CSV_HEADER = ["setting", "generator", "seed", "accuracy", "precision", "recall",
              "f1", "roc_auc", "wall_time_s"]


def metrics_csv_row(report: MetricsReport, setting: str, generator: str,
                    seed: int) -> list[str]:
    vals = report.values()
    return [setting, generator, str(seed)] + [
        f"{vals[k]:.6f}" for k in ("accuracy", "precision", "recall", "f1", "roc_auc")
    ] + [f"{vals['wall_time_s']:.3f}"]


class ResidualCnn(nn.Module):
    """Length-preserving conv stem, residual conv blocks, dense head.

    Head layers (the dense stack plus the output projection) are the
    fine-tuning surface for the transfer protocol.
    """

    HEAD_LAYERS = ["dense", "out"]

    def __init__(self, cfg: ClassifierConfig, leads: int, length: int, seed: int = 0):
        if length < cfg.kernel_len:
            raise ShapeError(
                f"input length {length} shorter than kernel {cfg.kernel_len}")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.leads = leads
        self.length = length
        self.stem = nn.Conv1d(leads, cfg.n_kernels, cfg.kernel_len, rng)
        self.blocks = [nn.Conv1d(cfg.n_kernels, cfg.n_kernels, cfg.kernel_len, rng)
                       for _ in range(cfg.n_conv_blocks)]
        self.dense = []
        self.dropouts = []
        in_features = cfg.n_kernels * length
        for i in range(cfg.n_dense_layers):
            self.dense.append(nn.Dense(in_features, cfg.n_neurons, rng))
            self.dropouts.append(nn.Dropout(cfg.dropout, seed=seed * 1009 + i))
            in_features = cfg.n_neurons
        self.out = nn.Dense(in_features, cfg.n_classes, rng)

    def arch(self) -> str:
        c = self.cfg
        return (f"rescnn-b{c.n_conv_blocks}-k{c.n_kernels}x{c.kernel_len}"
                f"-d{c.n_dense_layers}x{c.n_neurons}-c{c.n_classes}"
                f"-in{self.leads}x{self.length}")

    def features(self, x: Tensor) -> Tensor:
        """Conv trunk up to (and including) the flatten."""
        if x.shape[1] != self.leads:
            raise ShapeError(f"expected {self.leads} leads, got {x.shape[1]}")
        h = self.stem(x).relu()
        for block in self.blocks:
            h = nn.residual_add(h, block(h)).relu()
        return h.reshape(x.shape[0], -1)

    def head_forward(self, feat: Tensor) -> Tensor:
        h = feat
        for dense, drop in zip(self.dense, self.dropouts):
            h = drop(dense(h).relu())
        return self.out(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.head_forward(self.features(x))

    def trunk_frozen(self) -> bool:
        trunk = [p for n, p in self.named_params()
                 if n.startswith(("stem", "blocks"))]
        return bool(trunk) and all(p.frozen for p in trunk)

    def predict_proba(self, signals: np.ndarray, batch_size: int = 64) -> np.ndarray:
        self.eval_mode()
        chunks = []
        for lo in range(0, len(signals), batch_size):
            logits = self.forward(Tensor(signals[lo:lo + batch_size]))
            chunks.append(nn.softmax_probs(logits))
        return np.concatenate(chunks) if chunks else np.zeros((0, self.cfg.n_classes))


def build_classifier(cfg: ClassifierConfig, leads: int, length: int,
                     seed: int = 0) -> ResidualCnn:
    return ResidualCnn(cfg, leads, length, seed=seed)


def train_classifier(model: ResidualCnn, train: Dataset, val: Dataset,
                     cfg: ClassifierConfig | None = None, seed: int = 0,
                     lr_override: float | None = None) -> tuple[ResidualCnn, dict]:
    """Adam training with early stopping on validation loss.

    Returns the model restored to its best-validation parameters and a
    history dict of per-epoch losses. When the whole conv trunk is frozen
    (the transfer protocol) its outputs are constants, so they are computed
    once and epochs run over the dense head only; the trajectory is
    identical to the unfrozen code path.
    """
    cfg = cfg or model.cfg
    if not train.records or not val.records:
        raise ShapeError("train and val datasets must be non-empty")
    present = set(int(c) for c in train.labels_array())
    missing = [c for c in range(cfg.n_classes) if c not in present]
    if missing:
        warnings.warn(f"train set has no records for class ids {missing}")

    y_train = train.labels_array()
    y_val = val.labels_array()
    frozen_trunk = model.trunk_frozen()
    if frozen_trunk:
        model.eval_mode()
        x_train = model.features(Tensor(train.signals_array())).data
        x_val = model.features(Tensor(val.signals_array())).data
        run = model.head_forward
    else:
        x_train = train.signals_array()
        x_val = val.signals_array()
        run = model.forward

    opt = nn.Adam(model.params(), lr=lr_override if lr_override else cfg.lr)
    stopper = nn.EarlyStop(cfg.patience, cfg.min_delta)
    rng = np.random.default_rng(seed)
    history = {"train_loss": [], "val_loss": []}
    best_val = np.inf
    best_state = model.state_arrays()

    for _ in range(cfg.max_epochs):
        model.train_mode()
        order = rng.permutation(len(x_train))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = nn.cross_entropy(run(Tensor(x_train[idx])), y_train[idx])
            model.zero_grads()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        history["train_loss"].append(epoch_loss / len(x_train))

        model.eval_mode()
        val_loss = 0.0
        for lo in range(0, len(x_val), 128):
            val_loss += nn.cross_entropy(run(Tensor(x_val[lo:lo + 128])),
                                         y_val[lo:lo + 128]).item() * \
                len(x_val[lo:lo + 128])
        val_loss /= len(x_val)
        history["val_loss"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_arrays()
        if stopper.update(val_loss):
            break

    model.load_state_arrays(best_state)
    return model, history


# -- metrics ----------------------------------------------------------------


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def macro_prf1(cm: np.ndarray) -> tuple[float, float, float]:
    """Macro precision/recall/F1 over every class of the taxonomy.

    Classes absent from both truth and predictions contribute 0 to the
    averages and stay in the denominator.
    """
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0).astype(np.float64)
    true_pos = cm.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        recall = np.where(true_pos > 0, tp / true_pos, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(precision.mean()), float(recall.mean()), float(f1.mean())


def roc_auc_binary(scores: np.ndarray, positives: np.ndarray) -> float:
    """Trapezoidal ROC area over all score thresholds (ties averaged)."""
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    sorted_pos = positives[order].astype(np.float64)
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(1.0 - sorted_pos)
    # evaluate at the last index of each tied score group
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([boundary, [len(sorted_scores) - 1]])
    tpr = np.concatenate([[0.0], tp[idx] / n_pos])
    fpr = np.concatenate([[0.0], fp[idx] / n_neg])
    return float(np.trapezoid(tpr, fpr))


def roc_auc_macro(probs: np.ndarray, y_true: np.ndarray, n_classes: int) -> float:
    """One-vs-rest macro average; degenerate classes contribute 0."""
    aucs = [roc_auc_binary(probs[:, c], (y_true == c).astype(np.float64))
            for c in range(n_classes)]
    return float(np.mean(aucs))


def evaluate(model: ResidualCnn, test: Dataset) -> MetricsReport:
    """Accuracy, macro P/R/F1 and macro one-vs-rest ROC-AUC on ``test``."""
    if not test.records:
        raise ShapeError("cannot evaluate on an empty dataset")
    t0 = time.perf_counter()
    probs = model.predict_proba(test.signals_array())
    y_true = test.labels_array()
    y_pred = probs.argmax(axis=1)
    n_classes = model.cfg.n_classes
    cm = confusion_matrix(y_true, y_pred, n_classes)
    accuracy = float(np.trace(cm)) / max(cm.sum(), 1)
    precision, recall, f1 = macro_prf1(cm)
    auc = roc_auc_macro(probs, y_true, n_classes)
    return MetricsReport(accuracy=accuracy, precision_macro=precision,
                         recall_macro=recall, f1_macro=f1, roc_auc_macro=auc,
                         wall_time_s=time.perf_counter() - t0)
