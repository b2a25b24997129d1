"""Minimal reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient accumulator. Every
differentiable op records a backward closure and its parent tensors;
``Tensor.backward()`` topologically sorts the recorded graph and applies
the chain rule. Graphs are freed after backward (a second backward
through the same graph raises), gradients accumulate across separate
graphs until zeroed by the caller.

Convolutions are implemented as explicit primitives via im2col/col2im;
most other ops are thin closures over numpy. All data is float64 and a
finiteness guard raises on the first NaN/Inf an op produces.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "GraphFreedError",
    "no_grad",
    "concat",
    "conv2d",
    "conv_transpose2d",
]

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphFreedError(RuntimeError):
    """backward() was called through a graph that has already been freed."""


class no_grad:
    """Context manager disabling graph recording (inference / EMA updates)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _guard(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite values produced by an op")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
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
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()
        self._freed = False

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        if self._freed:
            raise GraphFreedError("graph already freed by a previous backward()")
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._freed and node._prev:
                raise GraphFreedError("graph already freed by a previous backward()")
            stack.append((node, True))
            for p in node._prev:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            if node._prev:
                # free intermediate storage; leaves keep their grads
                node._backward = None
                node._freed = True
                if not node.requires_grad:
                    node.grad = None

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out_data = _guard(self.data + other.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        out_data = -self.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._make(out_data, (self,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = _guard(self.data * other.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = _guard(self.data / other.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * out_data / other.data, other.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = _guard(self.data ** exponent)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(out_data, (self,), backward)

    def __matmul__(self, other):
        other = self._coerce(other)
        out_data = _guard(self.data @ other.data)

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.data.shape))

        return Tensor._make(out_data, (self, other), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(in_shape))

        return Tensor._make(out_data, (self,), backward)

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        return Tensor._make(out_data, (self,), backward)

    def __getitem__(self, key):
        out_data = self.data[key]

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, key, g)
                self._accumulate(full)

        return Tensor._make(out_data, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if self.requires_grad:
                if axis is None:
                    self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                else:
                    if not keepdims:
                        g = np.expand_dims(g, axis)
                    self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._make(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        out_data = _guard(np.exp(self.data))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data)

        return Tensor._make(out_data, (self,), backward)

    def log(self):
        out_data = _guard(np.log(self.data))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        return Tensor._make(out_data, (self,), backward)

    def sqrt(self):
        out_data = _guard(np.sqrt(self.data))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / out_data)

        return Tensor._make(out_data, (self,), backward)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (self.data > 0))

        return Tensor._make(out_data, (self,), backward)

    def leaky_relu(self, negative_slope: float = 0.2):
        out_data = np.where(self.data > 0, self.data, negative_slope * self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * np.where(self.data > 0, 1.0, negative_slope))

        return Tensor._make(out_data, (self,), backward)

    def sigmoid(self):
        out_data = _guard(1.0 / (1.0 + np.exp(-self.data)))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out_data ** 2))

        return Tensor._make(out_data, (self,), backward)

    def log_softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def backward(g):
            if self.requires_grad:
                softmax = np.exp(out_data)
                self._accumulate(g - softmax * g.sum(axis=axis, keepdims=True))

        return Tensor._make(_guard(out_data), (self,), backward)

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if self.requires_grad:
                dot = (g * out_data).sum(axis=axis, keepdims=True)
                self._accumulate(out_data * (g - dot))

        return Tensor._make(_guard(out_data), (self,), backward)


# -- multi-tensor / structured primitives -------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._make(out_data, tuple(tensors), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """View a padded (B, C, H, W) array as (B, C, kh, kw, h_out, w_out) patches."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    shape = (b, c, kh, kw, h_out, w_out)
    strides = (sb, sc, sh, sw, sh * stride, sw * stride)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (B, C, kh, kw, h_out, w_out) back to (B, C, H, W)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    h_out, w_out = cols.shape[4], cols.shape[5]
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad : pad + h, pad : pad + w]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D convolution. x: (B, Cin, H, W); weight: (Cout, Cin/groups, kh, kw)."""
    b, c_in, h, w = x.data.shape
    c_out, c_in_g, kh, kw = weight.data.shape
    if c_in != c_in_g * groups:
        raise ValueError(f"conv2d channel mismatch: input {c_in}, weight expects {c_in_g * groups}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.ascontiguousarray(_im2col(xp, kh, kw, stride, h_out, w_out))
    # channel groups are contiguous, so a plain reshape separates them
    cols_m = cols.reshape(b, groups, c_in_g * kh * kw, h_out * w_out)
    w_m = weight.data.reshape(groups, c_out // groups, c_in_g * kh * kw)
    out = np.matmul(w_m, cols_m)  # (B, G, Cout/G, L)
    out = out.reshape(b, c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    _guard(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_m = g.reshape(b, groups, c_out // groups, -1)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.matmul(g_m, cols_m.transpose(0, 1, 3, 2)).sum(axis=0)
            weight._accumulate(gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(w_m.transpose(0, 2, 1), g_m)  # (B, G, Cin/G*kh*kw, L)
            gcols = gcols.reshape(b, c_in, kh, kw, h_out, w_out)
            x._accumulate(_col2im(gcols, x.data.shape, kh, kw, stride, padding))

    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-D convolution. x: (B, Cin, H, W); weight: (Cin, Cout, kh, kw).

    Output spatial size is (H-1)*stride - 2*padding + k, the exact adjoint of
    conv2d with the same stride/padding.
    """
    b, c_in, h, w = x.data.shape
    c_in_w, c_out, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ValueError(f"conv_transpose2d channel mismatch: input {c_in}, weight expects {c_in_w}")
    h_out = (h - 1) * stride - 2 * padding + kh
    w_out = (w - 1) * stride - 2 * padding + kw
    if h_out <= 0 or w_out <= 0:
        raise ValueError("conv_transpose2d output would be empty")

    x_m = x.data.reshape(b, c_in, h * w)
    w_m = weight.data.reshape(c_in, c_out * kh * kw)
    cols = np.matmul(w_m.T[None], x_m)  # (B, Cout*kh*kw, H*W)
    cols = cols.reshape(b, c_out, kh, kw, h, w)
    out = _col2im(cols, (b, c_out, h_out, w_out), kh, kw, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    _guard(out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, kh, kw, stride, h, w)  # (B, Cout, kh, kw, H, W)
        gcols_m = np.ascontiguousarray(gcols.reshape(b, c_out * kh * kw, h * w))
        if x.requires_grad:
            gx = np.matmul(w_m[None], gcols_m)  # (B, Cin, H*W)
            x._accumulate(gx.reshape(b, c_in, h, w))
        if weight.requires_grad:
            gw = np.matmul(x_m, gcols_m.transpose(0, 2, 1)).sum(axis=0)  # (Cin, Cout*kh*kw)
            weight._accumulate(gw.reshape(weight.data.shape))

    return Tensor._make(out, parents, backward)
