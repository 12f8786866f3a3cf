"""Training losses."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def cross_entropy(logits: Tensor, classes) -> Tensor:
    """Mean negative log-likelihood of integer ``classes`` under softmax logits.

    Softmax is computed in max-shifted form; the log-sum-exp and the final
    mean accumulate in float64.
    """
    classes = np.asarray(classes)
    if logits.ndim != 2:
        raise ValueError(f"expected (batch, n_classes) logits, got {logits.shape}")
    n, k = logits.shape
    if classes.shape != (n,):
        raise ValueError(f"expected {n} class ids, got shape {classes.shape}")
    if classes.size and (classes.min() < 0 or classes.max() >= k):
        raise IndexError(
            f"class index out of range [0, {k}): min {classes.min()}, max {classes.max()}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    nll = logsumexp - z[np.arange(n), classes]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype),
                 requires_grad=logits.requires_grad, _parents=(logits,))

    def bwd(g):
        if not logits.requires_grad:
            return
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(n), classes] -= 1.0
        logits._accumulate((p * (float(g) / n)).astype(logits.dtype))

    out._backward = bwd
    return out


def softmax_probs(logits: Tensor | np.ndarray) -> np.ndarray:
    """Inference-side class probabilities (no tape). Rows sum to 1."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    d = a - b
    return (d * d).mean()
