"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-free engine in the micrograd style: every operation returns a
new Tensor that remembers its parents and a closure implementing the local
backward rule.  Calling ``backward()`` on a scalar result walks the graph in
reverse topological order, accumulates gradients into every tensor that
requires them, and then drops the graph.

Everything is computed in float64 so that finite-difference checks stay
tight.  Only the broadcasting the detection/distillation stack actually
needs is supported.
"""

from __future__ import annotations

import numbers
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "relu",
    "sigmoid",
    "softplus",
    "clamp_min",
    "stack",
    "conv2d",
    "masked_average_pool",
    "cosine_similarity",
    "softmax_temperature",
    "kl_divergence",
    "finite_difference_check",
]

KL_EPS = 1e-12


class Tensor:
    """Dense float64 array that can participate in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """New leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph -------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Only scalar (single-element) tensors may start a backward pass.  The
        graph is consumed: a second call on the same result raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward called twice on the same graph")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
        for node in order:
            if node._backward_fn is not None:
                node._parents = ()
                node._backward_fn = None
                node._consumed = True
        self._consumed = True

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
        else:
            self.grad = self.grad + grad

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = _from_op(self.data + other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.shape))
            out._backward_fn = bwd
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = _from_op(self.data * other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.shape))
            out._backward_fn = bwd
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = _from_op(self.data / other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-g * self.data / (other.data * other.data), other.shape)
                    )
            out._backward_fn = bwd
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, numbers.Number):
            raise TypeError("only constant exponents are supported")
        c = float(exponent)
        out = _from_op(self.data ** c, (self,), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                self._accumulate(g * c * self.data ** (c - 1.0))
            out._backward_fn = bwd
        return out

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        out = _from_op(self.data @ other.data, (self, other), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                if self.requires_grad:
                    self._accumulate(g @ other.data.T)
                if other.requires_grad:
                    other._accumulate(self.data.T @ g)
            out._backward_fn = bwd
        return out

    # -- elementwise functions -----------------------------------------------

    def exp(self) -> "Tensor":
        out = _from_op(np.exp(self.data), (self,), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                self._accumulate(g * out.data)
            out._backward_fn = bwd
        return out

    def log(self) -> "Tensor":
        out = _from_op(np.log(self.data), (self,), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                self._accumulate(g / self.data)
            out._backward_fn = bwd
        return out

    def sqrt(self) -> "Tensor":
        out = _from_op(np.sqrt(self.data), (self,), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                self._accumulate(g * 0.5 / out.data)
            out._backward_fn = bwd
        return out

    def abs(self) -> "Tensor":
        out = _from_op(np.abs(self.data), (self,), None)
        if out.requires_grad:
            def bwd(g: np.ndarray) -> None:
                self._accumulate(g * np.sign(self.data))
            out._backward_fn = bwd
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), None)
        if out.requires_grad:
            shape = self.shape
            def bwd(g: np.ndarray) -> None:
                self._accumulate(_spread(g, shape, axis, keepdims))
            out._backward_fn = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _from_op(self.data.mean(axis=axis, keepdims=keepdims), (self,), None)
        if out.requires_grad:
            shape = self.shape
            scale = self.size / max(1, out.size)
            def bwd(g: np.ndarray) -> None:
                self._accumulate(_spread(g, shape, axis, keepdims) / scale)
            out._backward_fn = bwd
        return out

    # -- shape ------------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _from_op(self.data.reshape(shape), (self,), None)
        if out.requires_grad:
            orig = self.shape
            def bwd(g: np.ndarray) -> None:
                self._accumulate(g.reshape(orig))
            out._backward_fn = bwd
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        out = _from_op(self.data.transpose(axes), (self,), None)
        if out.requires_grad:
            inverse = tuple(np.argsort(axes))
            def bwd(g: np.ndarray) -> None:
                self._accumulate(g.transpose(inverse))
            out._backward_fn = bwd
        return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _spread(grad: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(grad, axes)
    else:
        g = grad
    return np.broadcast_to(g, shape).copy()


# -- nonlinearities ------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    out = _from_op(np.maximum(0.0, x.data), (x,), None)
    if out.requires_grad:
        def bwd(g: np.ndarray) -> None:
            x._accumulate(g * (x.data > 0.0))
        out._backward_fn = bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    data = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _from_op(data, (x,), None)
    if out.requires_grad:
        def bwd(g: np.ndarray) -> None:
            x._accumulate(g * out.data * (1.0 - out.data))
        out._backward_fn = bwd
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    x = as_tensor(x)
    out = _from_op(np.logaddexp(0.0, x.data), (x,), None)
    if out.requires_grad:
        def bwd(g: np.ndarray) -> None:
            z = np.exp(-np.abs(x.data))
            sig = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
            x._accumulate(g * sig)
        out._backward_fn = bwd
    return out


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo) with subgradient 0 on the clamped side (including ties)."""
    x = as_tensor(x)
    out = _from_op(np.maximum(x.data, lo), (x,), None)
    if out.requires_grad:
        def bwd(g: np.ndarray) -> None:
            x._accumulate(g * (x.data > lo))
        out._backward_fn = bwd
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), None)
    if out.requires_grad:
        def bwd(g: np.ndarray) -> None:
            slabs = np.moveaxis(g, axis, 0)
            for t, slab in zip(tensors, slabs):
                if t.requires_grad:
                    t._accumulate(slab)
        out._backward_fn = bwd
    return out


# -- convolution -----------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with an odd square kernel.

    ``x`` may be [C_in, H, W] or batched [B, C_in, H, W]; the output keeps the
    same layout.  Differentiable with respect to input, weight and bias.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    b_n, c_in, h, w = xd.shape
    c_out, c_w, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if c_w != c_in:
        raise ValueError(f"input has {c_in} channels but weight expects {c_w}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError("kernel does not fit inside the padded input")

    padded = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b_n, c_in, k, k, h_out, w_out), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = padded[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    cols2d = cols.transpose(1, 2, 3, 0, 4, 5).reshape(c_in * k * k, b_n * h_out * w_out)
    w2d = weight.data.reshape(c_out, c_in * k * k)
    out2d = w2d @ cols2d + bias.data[:, None]
    out_data = out2d.reshape(c_out, b_n, h_out, w_out).transpose(1, 0, 2, 3)
    if not batched:
        out_data = out_data[0]

    out = _from_op(out_data, (x, weight, bias), None)
    if out.requires_grad:
        pad_shape = padded.shape
        def bwd(g: np.ndarray) -> None:
            gb = g if batched else g[None]
            g2d = gb.transpose(1, 0, 2, 3).reshape(c_out, b_n * h_out * w_out)
            if bias.requires_grad:
                bias._accumulate(g2d.sum(axis=1))
            if weight.requires_grad:
                weight._accumulate((g2d @ cols2d.T).reshape(weight.shape))
            if x.requires_grad:
                gcols = (w2d.T @ g2d).reshape(c_in, k, k, b_n, h_out, w_out).transpose(3, 0, 1, 2, 4, 5)
                gpad = np.zeros(pad_shape, dtype=np.float64)
                for i in range(k):
                    for j in range(k):
                        gpad[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gcols[:, :, i, j]
                gx = gpad[:, :, padding:padding + h, padding:padding + w]
                x._accumulate(gx if batched else gx[0])
        out._backward_fn = bwd
    return out


# -- pooling and similarity ----------------------------------------------------


def masked_average_pool(feature: Tensor, mask) -> tuple[Tensor, bool]:
    """Mean of ``feature`` over the cells where ``mask`` is 1, per channel.

    ``feature`` is [C, H, W] or batched [B, C, H, W]; ``mask`` is a binary
    [H, W] grid (a plain array or a Tensor treated as a constant).  Returns
    the pooled [C] vector and a present flag; an all-zero mask yields the
    zero vector with ``present=False`` and never divides by zero.
    """
    feature = as_tensor(feature)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask must be binary")
    if feature.shape[-2:] != m.shape:
        raise ValueError(f"mask grid {m.shape} does not match feature {feature.shape}")
    area = float(m.sum())
    if feature.ndim == 3:
        denom = max(1.0, area)
        pooled = (feature * Tensor(m)).sum(axis=(1, 2)) * (1.0 / denom)
    elif feature.ndim == 4:
        denom = feature.shape[0] * max(1.0, area)
        pooled = (feature * Tensor(m)).sum(axis=(0, 2, 3)) * (1.0 / denom)
    else:
        raise ValueError("feature must be [C,H,W] or [B,C,H,W]")
    return pooled, area > 0.0


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """a.b / (max(|a|, eps) * max(|b|, eps)) for 1-D vectors."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected matching 1-D vectors, got {a.shape} and {b.shape}")
    dot = (a * b).sum()
    # clamping the squared norm keeps the gradient finite at the zero vector
    na = clamp_min((a * a).sum(), eps * eps).sqrt()
    nb = clamp_min((b * b).sum(), eps * eps).sqrt()
    return dot / (na * nb)


def softmax_temperature(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    """softmax(logits / tau) along ``axis``, with max-subtraction for stability."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    shift = np.max(logits.data, axis=axis, keepdims=True)
    z = (logits - Tensor(shift)) * (1.0 / tau)
    e = z.exp()
    return e / e.sum(axis=axis, keepdims=True)


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1) -> Tensor:
    """Mean over slices of sum_n p_n log((p_n+eps)/(q_n+eps)), eps=1e-12.

    Both arguments must hold distributions along ``axis`` (each slice sums
    to 1 within 1e-6).  The gradient flows into both operands; detach the
    side that must not receive one.
    """
    p = as_tensor(p)
    q = as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=axis)
        if not np.allclose(sums, 1.0, atol=1e-6, rtol=0.0):
            raise ValueError(f"{name} slices do not sum to 1 along axis {axis}")
        if np.min(t.data) < -1e-12:
            raise ValueError(f"{name} has negative entries")
    terms = p * ((p + KL_EPS).log() - (q + KL_EPS).log())
    per_slice = terms.sum(axis=axis)
    return per_slice.mean()


# -- gradient checking ------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    ``f`` must be a deterministic map from a tensor to a scalar Tensor.  The
    argument is copied into a fresh leaf, so ``x`` itself is not touched.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0.0:
        raise ValueError("step size must be positive")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = leaf.grad.reshape(-1).copy()

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        fp = float(f(Tensor((flat + bump).reshape(base.shape))).data)
        fm = float(f(Tensor((flat - bump).reshape(base.shape))).data)
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
