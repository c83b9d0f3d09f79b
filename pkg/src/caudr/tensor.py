"""Dense tensors with reverse-mode automatic differentiation.

Minimal engine sufficient to train the task model and gate: float32 by
default, float64 available for gradient checking. Graphs are built
eagerly; each op records its parents together with vector-Jacobian
closures, and Tensor.backward() walks the tape in reverse topological
order.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from caudr import backend

# When enabled, every op output is checked for NaN/Inf right after the
# forward computation. Off by default: the check costs a full pass over
# the data.
_CHECK_FINITE = os.environ.get("CAUDR_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _finite_or_raise(data: np.ndarray, opname: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {opname}")


class Tensor:
    """A dense array plus optional gradient tape bookkeeping.

    data is always a contiguous numpy array of float32 or float64.
    grad is populated on leaf tensors with requires_grad by backward().
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # tuple of (parent Tensor, vjp: upstream grad -> parent grad)
        self._parents: tuple = ()

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into leaf .grad fields."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")

        # Iterative topological sort (graphs can be a few hundred nodes).
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
            for parent, vjp in node._parents:
                if not (parent.requires_grad or parent._parents):
                    continue
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    return _wrap(a, b), b


def _make(data: np.ndarray, parents, opname: str) -> Tensor:
    _finite_or_raise(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad or p._parents for p, _ in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _make((-a.data), [(a, lambda g: -g)], "neg")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, [(a, lambda g: g * (2.0 * a.data))], "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * (0.5 / out))], "sqrt")


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))], "abs")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _make(
        np.ascontiguousarray(a.data.reshape(shape)),
        [(a, lambda g: g.reshape(orig))],
        "reshape",
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True)
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(g, axes)
        return np.broadcast_to(gg, a.data.shape).astype(a.dtype, copy=True)

    return _make(out, [(a, vjp)], "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / n, dtype=a.dtype))


def stop_grad(a: Tensor) -> Tensor:
    return Tensor(a.data.copy(), requires_grad=False)


# -- activations / standard layers -------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, [(a, lambda g: g * (a.data > 0))], "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data
    return _make(
        out,
        [
            (a, lambda g: g @ b.data.T),
            (b, lambda g: a.data.T @ g),
        ],
        "matmul",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (B, in) times weight (out, in) plus bias (out,)."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ShapeMismatchError(
            f"linear: input features {x.data.shape} vs weight {weight.data.shape}"
        )
    out = matmul(x, transpose2d(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def transpose2d(a: Tensor) -> Tensor:
    return _make(
        np.ascontiguousarray(a.data.T),
        [(a, lambda g: np.ascontiguousarray(g.T))],
        "transpose",
    )


def global_avg_pool(x: Tensor, data_format: str = "nchw") -> Tensor:
    """Spatial mean of a 4-D activation -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects a 4-D input, got {x.data.shape}")
    if data_format == "nchw":
        n, c, h, w = x.data.shape
        out = x.data.mean(axis=(2, 3))
    else:
        n, h, w, c = x.data.shape
        out = np.einsum("nhwc->nc", x.data) * np.asarray(1.0 / (h * w), dtype=x.dtype)
    scale = 1.0 / (h * w)

    def vjp(g: np.ndarray) -> np.ndarray:
        gs = g * scale
        if data_format == "nchw":
            expanded = gs[:, :, None, None]
        else:
            expanded = gs[:, None, None, :]
        return np.broadcast_to(expanded, x.data.shape).astype(x.dtype, copy=True)

    return _make(out, [(x, vjp)], "global_avg_pool")


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           data_format: str = "nchw") -> Tensor:
    """Cross-correlation with an OIKK weight; input NCHW (or NHWC).

    The arithmetic runs in NHWC, where window packing streams contiguous
    channel runs; NCHW inputs are adapted at the boundary.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-D input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    if data_format == "nchw":
        xt = _make(
            np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)),
            [(x, lambda g: np.ascontiguousarray(g.transpose(0, 3, 1, 2)))],
            "to_nhwc",
        )
        out = _conv2d_nhwc(xt, weight, stride, padding)
        return _make(
            np.ascontiguousarray(out.data.transpose(0, 3, 1, 2)),
            [(out, lambda g: np.ascontiguousarray(g.transpose(0, 2, 3, 1)))],
            "to_nchw",
        )
    return _conv2d_nhwc(x, weight, stride, padding)


def _conv2d_nhwc(x: Tensor, weight: Tensor, stride: int, padding: int) -> Tensor:
    n, h, w, c = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if c != ci:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input {x.data.shape} has {c} channels, "
            f"weight {weight.data.shape} expects {ci}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatchError(
            f"conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    if kh == 1 and kw == 1 and padding == 0:
        return _conv1x1_nhwc(x, weight, stride)

    # windows are laid out (kh, kw, c); match with a transposed weight view
    w2 = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, kh * kw * c)
    cols = backend.im2col(x.data, kh, kw, stride, padding)  # (N*OH*OW, kh*kw*C)
    out = (cols @ w2.T).reshape(n, oh, ow, o)

    def vjp_x(g: np.ndarray) -> np.ndarray:
        dcol = g.reshape(n * oh * ow, o) @ w2
        return backend.col2im_add(dcol, n, h, w, c, kh, kw, stride, padding)

    def vjp_w(g: np.ndarray) -> np.ndarray:
        dw2 = g.reshape(n * oh * ow, o).T @ cols  # (O, kh*kw*C)
        return np.ascontiguousarray(
            dw2.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        )

    return _make(out, [(x, vjp_x), (weight, vjp_w)], "conv2d")


def _conv1x1_nhwc(x: Tensor, weight: Tensor, stride: int) -> Tensor:
    """1x1 convolution as a single matmul, skipping window packing."""
    n, h, w, c = x.data.shape
    o = weight.data.shape[0]
    xs = x.data[:, ::stride, ::stride, :] if stride > 1 else x.data
    oh, ow = xs.shape[1], xs.shape[2]
    w2 = weight.data.reshape(o, c)
    xr = np.ascontiguousarray(xs).reshape(n * oh * ow, c)
    out = (xr @ w2.T).reshape(n, oh, ow, o)

    def vjp_x(g: np.ndarray) -> np.ndarray:
        dxs = (g.reshape(n * oh * ow, o) @ w2).reshape(n, oh, ow, c)
        if stride == 1:
            return dxs
        dx = np.zeros_like(x.data)
        dx[:, ::stride, ::stride, :] = dxs
        return dx

    def vjp_w(g: np.ndarray) -> np.ndarray:
        return (g.reshape(n * oh * ow, o).T @ xr).reshape(o, c, 1, 1)

    return _make(out, [(x, vjp_x), (weight, vjp_w)], "conv2d")


def batch_stat_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    data_format: str = "nchw",
) -> Tensor:
    """Per-channel normalization with learned scale/shift.

    Training mode normalizes with batch statistics and updates the running
    averages in place; eval mode uses the running averages.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"batch_stat_norm expects a 4-D input, got {x.data.shape}")
    if data_format == "nchw":
        n, c, h, w = x.data.shape
        sig = "nchw"
        expand = (None, slice(None), None, None)
    else:
        n, h, w, c = x.data.shape
        sig = "nhwc"
        expand = (None, None, None, slice(None))
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatchError(
            f"batch_stat_norm scale/shift must have shape ({c},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    m = n * h * w

    if training:
        # single-pass channel reductions; einsum avoids the slow strided
        # multi-pass reductions of .mean/.var over non-channel axes
        inv_m = np.asarray(1.0 / m, dtype=x.dtype)
        mean = np.einsum(f"{sig}->c", x.data) * inv_m
        sq = np.einsum(f"{sig},{sig}->c", x.data, x.data) * inv_m
        var = sq - mean * mean  # population variance
        np.maximum(var, 0, out=var)  # guard tiny negative rounding
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    mean = mean.astype(x.dtype, copy=False)
    if data_format == "nhwc":
        # channels innermost: the fused elementwise maps stream (rows, C)
        x2 = x.data.reshape(m, c)
        xhat2, out2 = backend.bn_forward_map(x2, mean, inv_std, gamma.data, beta.data)
        xhat = xhat2.reshape(x.data.shape)
        out = out2.reshape(x.data.shape)
    else:
        xhat = (x.data - mean[expand]) * inv_std[expand]
        out = gamma.data[expand] * xhat + beta.data[expand]

    def vjp_x(g: np.ndarray) -> np.ndarray:
        if not training:
            return (g * gamma.data[expand]) * inv_std[expand]
        # standard batch-stat backward: mean and variance depend on x
        gxhat = g * gamma.data[expand]
        sum_gxhat = np.einsum(f"{sig}->c", gxhat)
        sum_gxhat_xhat = np.einsum(f"{sig},{sig}->c", gxhat, xhat)
        if data_format == "nhwc":
            pre = (inv_std / m).astype(x.dtype, copy=False)
            dx2 = backend.bn_backward_map(
                g.reshape(m, c), xhat.reshape(m, c), gamma.data, pre,
                sum_gxhat.astype(x.dtype, copy=False),
                sum_gxhat_xhat.astype(x.dtype, copy=False), float(m),
            )
            return dx2.reshape(x.data.shape)
        return (
            inv_std[expand]
            / m
            * (m * gxhat - sum_gxhat[expand] - xhat * sum_gxhat_xhat[expand])
        ).astype(x.dtype, copy=False)

    def vjp_gamma(g: np.ndarray) -> np.ndarray:
        return np.einsum(f"{sig},{sig}->c", g, xhat)

    def vjp_beta(g: np.ndarray) -> np.ndarray:
        return np.einsum(f"{sig}->c", g)

    return _make(out, [(x, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)], "batch_stat_norm")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"logits must be 2-D, got {logits.data.shape}")
    b, k = logits.data.shape
    if labels.shape != (b,):
        raise ShapeMismatchError(
            f"labels shape {labels.shape} does not match batch size {b}"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"labels must lie in [0, {k - 1}], got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sez)
    loss = np.asarray(-log_probs[np.arange(b), labels].mean(), dtype=logits.dtype)

    def vjp(g: np.ndarray) -> np.ndarray:
        probs = ez / sez
        probs[np.arange(b), labels] -= 1.0
        return (g * probs / b).astype(logits.dtype, copy=False)

    return _make(loss, [(logits, vjp)], "softmax_cross_entropy")


def batch_permute(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the batch dimension by a permutation (differentiable gather)."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (x.data.shape[0],):
        raise ShapeMismatchError(
            f"permutation length {perm.shape} does not match batch {x.data.shape[0]}"
        )
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out = np.ascontiguousarray(x.data[perm])
    # perm is a bijection, so the backward gather needs no accumulation
    return _make(out, [(x, lambda g: np.ascontiguousarray(g[inv]))], "batch_permute")


def ste_threshold(a: Tensor, threshold: float) -> Tensor:
    """Binarize forward (> threshold), pass gradients through unchanged."""
    out = (a.data > threshold).astype(a.dtype)
    return _make(out, [(a, lambda g: g)], "ste_threshold")


# -- parameters ---------------------------------------------------------------


class Parameter(Tensor):
    """A leaf tensor with requires_grad set and a model-unique name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


# -- gradient checking --------------------------------------------------------


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() with respect to x.data."""
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.data.shape)


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error of element pairs (a, n) is |a - n| / max(|a|, |n|,
    floor); the floor keeps near-zero pairs from dominating.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(f, p, h=h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
