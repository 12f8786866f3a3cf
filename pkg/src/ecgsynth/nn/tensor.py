"""Reverse-mode automatic differentiation over a dynamically recorded tape.

A ``Tensor`` wraps a numpy array and remembers how it was produced; calling
``backward()`` on a scalar result walks the recorded graph in reverse
topological order and accumulates exact gradients of the forward computation.
Only the op vocabulary the models in this package need is provided; there is
no graph compilation and no GPU path.

Scalar reductions (``sum``, ``mean`` and the losses built on them) accumulate
in float64 regardless of storage dtype; dense/conv contractions run in the
storage dtype.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype.kind not in "fiu":
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # -- graph machinery ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        """Backpropagate from this node; defaults to d(self)/d(self) = 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient requires a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = Tensor(
            self.data + other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
        )

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = bwd
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = Tensor(
            self.data * other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
        )

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = Tensor(
            self.data / other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
        )

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise ShapeError("only scalar exponents are supported")
        out = Tensor(self.data ** exponent, requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1))

        out._backward = bwd
        return out

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * out.data)

        out._backward = bwd
        return out

    def log(self):
        out = Tensor(np.log(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        out._backward = bwd
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / out.data)

        out._backward = bwd
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out.data * out.data))

        out._backward = bwd
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(s, requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * out.data * (1.0 - out.data))

        out._backward = bwd
        return out

    def relu(self):
        mask = self.data > 0
        out = Tensor(
            np.where(mask, self.data, 0.0).astype(self.data.dtype),
            requires_grad=self.requires_grad,
            _parents=(self,),
        )

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        out._backward = bwd
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor(self.data.reshape(shape), requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        out._backward = bwd
        return out

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out = Tensor(
            self.data.transpose(axes), requires_grad=self.requires_grad, _parents=(self,)
        )

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        out._backward = bwd
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], requires_grad=self.requires_grad, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accumulate(full)

        out._backward = bwd
        return out

    # -- reductions (float64 accumulation) ------------------------------------

    def sum(self, axis=None, keepdims=False):
        acc = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
        out = Tensor(
            acc.astype(self.data.dtype), requires_grad=self.requires_grad, _parents=(self,)
        )

        def bwd(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).astype(self.data.dtype))
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).astype(self.data.dtype))

        out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- contractions ----------------------------------------------------------

    def matmul(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        out = Tensor(
            a @ b,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
        )

        def bwd(g):
            if self.requires_grad:
                if b.ndim == 1:
                    ga = np.expand_dims(g, -1) * b  # (..., m) x (n,) case
                else:
                    ga = g @ np.swapaxes(b, -1, -2)
                if a.ndim == 1:
                    ga = ga.sum(axis=tuple(range(ga.ndim - 1)))
                self._accumulate(_unbroadcast(ga, a.shape))
            if other.requires_grad:
                if a.ndim == 1:
                    gb = np.expand_dims(a, -1) * np.expand_dims(g, -2)
                else:
                    gb = np.swapaxes(a, -1, -2) @ g
                if b.ndim == 1:
                    gb = gb.sum(axis=tuple(range(gb.ndim - 1)))
                other._accumulate(_unbroadcast(gb, b.shape))

        out._backward = bwd
        return out

    __matmul__ = matmul


class Param(Tensor):
    """Trainable tensor with a freeze flag and a stable name."""

    __slots__ = ("frozen", "name")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.frozen = frozen
        self.name = name

    def __repr__(self):
        state = "frozen" if self.frozen else "trainable"
        return f"Param({self.name!r}, shape={self.data.shape}, {state})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    out = Tensor(data, requires_grad=req, _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    out._backward = bwd
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    out = Tensor(data, requires_grad=req, _parents=tuple(tensors))

    def bwd(g):
        slabs = np.moveaxis(g, axis, 0)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad:
                t._accumulate(slab)

    out._backward = bwd
    return out


# -- fused neural-net primitives ------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1) -> Tensor:
    """Length-preserving 1D convolution ('same' padding, then stride).

    ``x`` is (batch, in_channels, length), ``weight`` is
    (out_channels, in_channels, kernel); output length is ceil(length/stride).
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError(f"conv1d expects 3D input/weight, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"conv1d channel mismatch: input has {xd.shape[1]}, weight expects {wd.shape[1]}"
        )
    batch, c_in, length = xd.shape
    c_out, _, k = wd.shape
    if length < 1:
        raise ShapeError("conv1d input length must be >= 1")
    out_len = -(-length // stride)
    span = (k - 1) * dilation + 1
    pad_total = max((out_len - 1) * stride + span - length, 0)
    pad_l = pad_total // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad_l, pad_total - pad_l)))

    def tap_view(arr, tap):
        # strided view of the positions tap k contributes to: no copies
        lo = tap * dilation
        return arr[:, :, lo:lo + (out_len - 1) * stride + 1:stride]

    y = np.zeros((batch, c_out, out_len), dtype=xd.dtype)
    for tap in range(k):
        y += np.matmul(wd[:, :, tap], tap_view(xp, tap))
    if bias is not None:
        y += bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    req = any(p.requires_grad for p in parents)
    out = Tensor(y, requires_grad=req, _parents=parents)

    def bwd(g):
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for tap in range(k):
                gw[:, :, tap] = np.einsum("bol,bil->oi", g, tap_view(xp, tap))
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)).astype(bias.data.dtype))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for tap in range(k):
                tap_view(gxp, tap)[...] += np.matmul(wd[:, :, tap].T, g)
            x._accumulate(gxp[:, :, pad_l:pad_l + length])

    out._backward = bwd
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = Tensor(table.data[ids], requires_grad=table.requires_grad, _parents=(table,))

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.ravel(), g.reshape(-1, table.data.shape[1]))
            table._accumulate(gt)

    out._backward = bwd
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-shifted)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, requires_grad=x.requires_grad, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            x._accumulate((p * (g - dot)).astype(x.data.dtype))

    out._backward = bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gain.data.shape[-1] != x.data.shape[-1]:
        raise ShapeError(
            f"layer_norm gain has {gain.data.shape[-1]} features, input has {x.data.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    y = xn * gain.data + bias.data
    out = Tensor(y, requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad,
                 _parents=(x, gain, bias))
    n = x.data.shape[-1]

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate(
                _unbroadcast((g * xn).astype(gain.data.dtype), gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g.astype(bias.data.dtype), bias.data.shape))
        if x.requires_grad:
            gxn = g * gain.data
            gx = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                        - xn * (gxn * xn).mean(axis=-1, keepdims=True))
            x._accumulate(gx.astype(x.data.dtype))

    out._backward = bwd
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, no-op at inference."""
    if not training or p <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(mask)


# -- spectral primitives (linear maps with exact adjoints) ----------------------


def rfft_stack(x: Tensor) -> Tensor:
    """Real FFT along the last axis, returned as (..., 2, n//2+1) [re; im]."""
    spec = np.fft.rfft(x.data, axis=-1)
    y = np.stack([spec.real, spec.imag], axis=-2).astype(x.data.dtype)
    out = Tensor(y, requires_grad=x.requires_grad, _parents=(x,))
    n = x.data.shape[-1]

    def bwd(g):
        if not x.requires_grad:
            return
        G = g[..., 0, :] + 1j * g[..., 1, :]
        Gadj = G.copy()
        hi = n // 2 if n % 2 == 0 else (n + 1) // 2
        Gadj[..., 1:hi] *= 0.5
        gx = np.fft.irfft(Gadj, n=n, axis=-1) * n
        x._accumulate(gx.astype(x.data.dtype))

    out._backward = bwd
    return out


def irfft_stack(z: Tensor, n: int) -> Tensor:
    """Inverse real FFT of a stacked (..., 2, n//2+1) half-spectrum.

    The always-zero imaginary slots (DC and, for even ``n``, Nyquist) are
    projected out before inversion so the op is a well-defined linear map.
    """
    zre = z.data[..., 0, :].astype(np.float64)
    zim = z.data[..., 1, :].astype(np.float64).copy()
    zim[..., 0] = 0.0
    if n % 2 == 0:
        zim[..., -1] = 0.0
    y = np.fft.irfft(zre + 1j * zim, n=n, axis=-1)
    out = Tensor(y.astype(z.data.dtype), requires_grad=z.requires_grad, _parents=(z,))

    def bwd(g):
        if not z.requires_grad:
            return
        spec = np.fft.rfft(g, axis=-1) / n
        gre = spec.real.copy()
        gim = spec.imag.copy()
        hi = n // 2 if n % 2 == 0 else (n + 1) // 2
        gre[..., 1:hi] *= 2.0
        gim[..., 1:hi] *= 2.0
        gim[..., 0] = 0.0
        if n % 2 == 0:
            gim[..., -1] = 0.0
        gz = np.stack([gre, gim], axis=-2)
        z._accumulate(gz.astype(z.data.dtype))

    out._backward = bwd
    return out


def overlap_add(frames: Tensor, hop: int, out_len: int) -> Tensor:
    """Sum frames (..., n_frames, frame_len) at offsets of ``hop`` samples."""
    fd = frames.data
    n_frames, flen = fd.shape[-2], fd.shape[-1]
    total = (n_frames - 1) * hop + flen
    if out_len > total:
        raise ShapeError(f"overlap_add output {out_len} exceeds covered length {total}")
    y = np.zeros(fd.shape[:-2] + (total,), dtype=fd.dtype)
    for f in range(n_frames):
        y[..., f * hop:f * hop + flen] += fd[..., f, :]
    out = Tensor(y[..., :out_len], requires_grad=frames.requires_grad, _parents=(frames,))

    def bwd(g):
        if not frames.requires_grad:
            return
        gfull = np.zeros(fd.shape[:-2] + (total,), dtype=g.dtype)
        gfull[..., :out_len] = g
        gframes = np.empty_like(fd)
        for f in range(n_frames):
            gframes[..., f, :] = gfull[..., f * hop:f * hop + flen]
        frames._accumulate(gframes)

    out._backward = bwd
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each sample of the last axis ``factor`` times."""
    out = Tensor(
        np.repeat(x.data, factor, axis=-1), requires_grad=x.requires_grad, _parents=(x,)
    )

    def bwd(g):
        if x.requires_grad:
            gr = g.reshape(g.shape[:-1] + (x.data.shape[-1], factor)).sum(axis=-1)
            x._accumulate(gr.astype(x.data.dtype))

    out._backward = bwd
    return out
