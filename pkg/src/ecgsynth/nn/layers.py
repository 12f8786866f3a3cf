"""Layer vocabulary: conv1d, dense, relu, dropout, layer norm, embedding,
multi-head self-attention and residual blocks, plus the Module registry
they hang off."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Param, Tensor


class Module:
    """Base class: registers child modules/params by attribute assignment."""

    training = True

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_params(self, prefix: str = ""):
        out = []
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Param):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_params(prefix=name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_params(prefix=f"{name}.{i}."))
                    elif isinstance(item, Param):
                        out.append((f"{name}.{i}", item))
        return out

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train_mode(self, flag: bool = True):
        for m in self.modules():
            m.training = flag
        return self

    def eval_mode(self):
        return self.train_mode(False)

    def to_dtype(self, dtype):
        """Cast every parameter in place (used by gradient checking)."""
        for p in self.params():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grads(self):
        for p in self.params():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.named_params():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ShapeError(f"param {name}: stored {src.shape} vs model {p.data.shape}")
            p.data = src.astype(p.data.dtype).copy()
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _glorot(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.weight = Param(
            _glorot(rng, (in_features, out_features), in_features, out_features, dtype),
            name="weight")
        self.bias = Param(np.zeros(out_features, dtype=dtype), name="bias")

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(
                f"dense expects last dim {self.weight.shape[0]}, got {x.shape[-1]}")
        return x @ self.weight + self.bias


class Conv1d(Module):
    """Same-padded 1D convolution over (batch, channels, length)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, dilation: int = 1,
                 dtype=np.float32):
        fan_in = in_channels * kernel
        self.weight = Param(
            _glorot(rng, (out_channels, in_channels, kernel), fan_in, out_channels, dtype),
            name="weight")
        self.bias = Param(np.zeros(out_channels, dtype=dtype), name="bias")
        self.stride = stride
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.stride,
                        dilation=self.dilation)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class Dropout(Module):
    """Seeded inverted dropout; inference is a no-op."""

    def __init__(self, p: float, seed: int = 0):
        if not 0.0 <= p < 1.0:
            raise ShapeError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, self.training)


class LayerNorm(Module):
    def __init__(self, features: int, dtype=np.float32):
        self.gain = Param(np.ones(features, dtype=dtype), name="gain")
        self.bias = Param(np.zeros(features, dtype=dtype), name="bias")

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n_entries: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.table = Param(
            (rng.standard_normal((n_entries, dim)) * 0.02).astype(dtype), name="table")

    def forward(self, ids) -> Tensor:
        return T.embedding(self.table, np.asarray(ids))


class MultiheadSelfAttention(Module):
    """Post-norm residual attention block over (batch, seq, dim)."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % n_heads != 0:
            raise ShapeError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Dense(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Dense(dim, dim, rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(x)  # (b, s, 3d)
        qkv = qkv.reshape(b, s, 3, h, dh).transpose((2, 0, 3, 1, 4))
        q = qkv[0].reshape(b * h, s, dh)
        k = qkv[1].reshape(b * h, s, dh)
        v = qkv[2].reshape(b * h, s, dh)
        att = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(dh))
        att = T.softmax(att, axis=-1)
        ctx = att @ v  # (b*h, s, dh)
        ctx = ctx.reshape(b, h, s, dh).transpose((0, 2, 1, 3)).reshape(b, s, d)
        return self.norm(x + self.proj(ctx))


def residual_add(x: Tensor, fx: Tensor) -> Tensor:
    if x.shape != fx.shape:
        raise ShapeError(f"residual_add shape mismatch: {x.shape} vs {fx.shape}")
    return x + fx


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def freeze_all_except_head(model: Module, head_layer_names: list[str]) -> Module:
    """Freeze every parameter except those under the named layers.

    ``head_layer_names`` are prefixes into the dotted parameter namespace
    (e.g. ``["dense_head"]`` freezes everything outside that subtree).
    Frozen params also stop requesting gradients, so backward passes skip
    the frozen trunk entirely.
    """
    if not head_layer_names:
        raise NameError("must name at least one head layer to keep trainable")
    named = model.named_params()
    for head in head_layer_names:
        if not any(n == head or n.startswith(head + ".") for n, _ in named):
            raise NameError(f"unknown layer name {head!r}")
    for name, p in named:
        p.frozen = not any(
            name == head or name.startswith(head + ".") for head in head_layer_names)
        p.requires_grad = not p.frozen
    return model
