# -*- coding: UTF-8 -*-
"""
Dense tensors with reverse-mode differentiation
Rank-4 (batch, channels, height, width) activations and rank-2 fully
connected inputs; parameter vectors are rank 1 and losses rank 0. Every op
records a closure that pushes the output gradient back to its parents.

Broadcasting is limited to attention gates: an (n, c, 1, 1) or (n, 1, h, w)
operand against an (n, c, h, w) one.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

EPS_NORM = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim not in (0, 1, 2, 4):
            raise ShapeError("Tensors are rank 0, 1, 2 or 4; got shape {}".format(data.shape))
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(Graph.from_output(self), self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        label = " name={!r}".format(self.name) if self.name else ""
        return "Tensor(shape={}, dtype={}{})".format(self.shape, self.dtype, label)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _backward=backward_fn if needs else None)


def _send(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.accumulate(g)


class Graph:
    """Nodes reachable from an output, in topological order (parents first)"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        seen = set()
        stack = [(output, False)]
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
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate .grad of every leaf that requires it with d(loss)/d(leaf)"""
    if loss.data.size != 1:
        raise GraphError("backward needs a scalar loss, got shape {}".format(loss.shape))
    if not loss.requires_grad:
        raise GraphError("backward called on a tensor that is detached from any parameter")
    for node in graph.nodes:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                node.grad = None


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _gate_axes(big: Tuple[int, ...], small: Tuple[int, ...]) -> Optional[Tuple[int, ...]]:
    if big == small:
        return ()
    if len(big) == 4 and len(small) == 4 and big[0] == small[0]:
        if small[1:] == (big[1], 1, 1):
            return (2, 3)
        if small[1:] == (1, big[2], big[3]):
            return (1,)
    return None


def _check_pair(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    axes = _gate_axes(a.shape, b.shape)
    if axes is None:
        raise ShapeError("{}: shapes {} and {} do not match".format(op, a.shape, b.shape))
    return axes


def add(a: Tensor, b: Tensor) -> Tensor:
    axes = _check_pair("add", a, b)

    def back(g):
        _send(a, g)
        _send(b, g.sum(axis=axes, keepdims=True) if axes else g)

    return _result(a.data + b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a channel (n,c,1,1) or spatial (n,1,h,w) gate"""
    axes = _check_pair("mul", a, b)

    def back(g):
        _send(a, g * b.data)
        gb = g * a.data
        _send(b, gb.sum(axis=axes, keepdims=True) if axes else gb)

    return _result(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        _send(a, g * c)

    return _result(a.data * c, (a,), back)


def total(a: Tensor) -> Tensor:
    def back(g):
        _send(a, np.broadcast_to(g, a.shape))

    return _result(a.data.sum(), (a,), back)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _send(a, np.broadcast_to(g / n, a.shape))

    return _result(a.data.sum() / n, (a,), back)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def back(g):
        _send(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ShapeError("concat: shapes {} and {} differ off axis {}".format(tensors[0].shape, t.shape, axis))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _send(t, g[tuple(index)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def maximum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise max over a list; gradient goes to the first maximal entry"""
    if not tensors:
        raise ShapeError("maximum needs at least one tensor")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("maximum: shapes {} and {} differ".format(tensors[0].shape, t.shape))
    stacked = np.stack([t.data for t in tensors])
    winner = np.argmax(stacked, axis=0)

    def back(g):
        for k, t in enumerate(tensors):
            _send(t, np.where(winner == k, g, 0.0))

    return _result(np.max(stacked, axis=0), tensors, back)


# ---------------------------------------------------------------------------
# Activations


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    positive = x.data > 0

    def back(g):
        _send(x, np.where(positive, g, g * slope))

    return _result(np.where(positive, x.data, x.data * slope), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def back(g):
        _send(x, g * y * (1.0 - y))

    return _result(y, (x,), back)


def l2norm_channels(x: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Divide each position's channel vector by its Euclidean norm"""
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    y = x.data / denom

    def back(g):
        proj = g - y * np.sum(g * y, axis=1, keepdims=True)
        _send(x, np.where(clipped, g, proj) / denom)

    return _result(y, (x,), back)


# ---------------------------------------------------------------------------
# Convolution and linear maps


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int]:
    out = -(-size // stride)
    total_pad = max((out - 1) * stride + kernel - size, 0)
    return total_pad // 2, total_pad - total_pad // 2


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, name: str = "conv2d") -> Tensor:
    """
    Cross-correlation with "same" zero padding

    Stride 1 keeps (h, w); stride s gives ceil(h / s), ceil(w / s).
    """
    if x.data.ndim != 4:
        raise ShapeError("{}: expected a rank-4 input, got {}".format(name, x.shape))
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ShapeError("{}: expects {} input channels, got input of shape {}".format(name, in_c, x.shape))
    pt, pb = same_padding(h, kh, stride)
    pl, pr = same_padding(w, kw, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ho = -(-h // stride)
    wo = -(-w // stride)

    def window(i, j):
        return (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))

    out = np.zeros((n, ho, wo, out_c), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(xp[window(i, j)], weight.data[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(g, xp[window(i, j)], axes=([0, 2, 3], [0, 2, 3]))
            weight.accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[window(i, j)] += np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            x.accumulate(gxp[:, :, pt : pt + h, pl : pl + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, name: str = "linear") -> Tensor:
    """x (n, in) times weight (out, in) transposed, plus bias"""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("{}: expects (n, {}) input, got {}".format(name, weight.shape[1], x.shape))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        if weight.requires_grad:
            weight.accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        _send(x, g @ weight.data)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, back)


# ---------------------------------------------------------------------------
# Normalisation


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS):
    """Batch-statistics normalisation; returns the output and the (mean, var) it used"""
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)

    def back(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g4
            gx = (dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std
            x.accumulate(gx)

    unbiased = var.reshape(-1) * (count / (count - 1) if count > 1 else 1.0)
    return _result(out, (x, gamma, beta), back), mu.reshape(-1), unbiased


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray, eps: float = BN_EPS) -> Tensor:
    inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(1, -1, 1, 1)
    xhat = (x.data - running_mean.reshape(1, -1, 1, 1)) * inv_std
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, -1, 1, 1)

    def back(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        _send(x, g * g4 * inv_std)

    return _result(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# Pooling and resampling


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def back(g):
        _send(x, np.broadcast_to(g / area, x.shape))

    return _result(x.data.sum(axis=(2, 3), keepdims=True) / area, (x,), back)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max; ties go to the lowest linear index"""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = np.argmax(flat, axis=2)[..., None]
    out = np.take_along_axis(flat, arg, axis=2).reshape(n, c, 1, 1)

    def back(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, arg, g.reshape(n, c, 1), axis=2)
        _send(x, gx.reshape(x.shape))

    return _result(out, (x,), back)


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]

    def back(g):
        _send(x, np.broadcast_to(g / c, x.shape))

    return _result(x.data.sum(axis=1, keepdims=True) / c, (x,), back)


def channel_max(x: Tensor) -> Tensor:
    """Max over channels per position; ties go to the lowest channel index"""
    arg = np.argmax(x.data, axis=1)[:, None]
    out = np.take_along_axis(x.data, arg, axis=1)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, g, axis=1)
        _send(x, gx)

    return _result(out, (x,), back)


def _pool_windows(x: np.ndarray, fill: float) -> np.ndarray:
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=fill)
    ho, wo = xp.shape[2] // 2, xp.shape[3] // 2
    return xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)


def _unpool(gw: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, ho, wo, _ = gw.shape
    full = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
    return full[:, :, :h, :w]


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool, ceil mode; ties go to the lowest linear index"""
    h, w = x.shape[2], x.shape[3]
    win = _pool_windows(x.data, -np.inf)
    arg = np.argmax(win, axis=4)[..., None]
    out = np.take_along_axis(win, arg, axis=4)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg, g[..., None], axis=4)
        _send(x, _unpool(gw, h, w))

    return _result(out, (x,), back)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 average pool, ceil mode; border windows average their real pixels"""
    h, w = x.shape[2], x.shape[3]
    win = _pool_windows(x.data, 0.0)
    counts = _pool_windows(np.ones((1, 1, h, w), dtype=x.data.dtype), 0.0).sum(axis=4)
    out = win.sum(axis=4) / counts

    def back(g):
        gw = np.broadcast_to((g / counts)[..., None], win.shape)
        _send(x, _unpool(np.ascontiguousarray(gw), h, w))

    return _result(out, (x,), back)


def bilinear_matrix(size_in: int, size_out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, shape (size_out, size_in)"""
    m = np.zeros((size_out, size_in), dtype=dtype)
    ratio = size_in / size_out
    for o in range(size_out):
        src = min(max((o + 0.5) * ratio - 0.5, 0.0), size_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    mh = bilinear_matrix(h, out_h, x.data.dtype)
    mw = bilinear_matrix(w, out_w, x.data.dtype)
    out = mh @ x.data @ mw.T

    def back(g):
        _send(x, mh.T @ g @ mw)

    return _result(out, (x,), back)


def broadcast_light(directions: np.ndarray, height: int, width: int, dtype=np.float64) -> Tensor:
    """(n, 3) light directions tiled to (n, 3, h, w); constant input, no gradient"""
    d = np.asarray(directions, dtype=dtype)
    return Tensor(np.broadcast_to(d[:, :, None, None], (d.shape[0], 3, height, width)).copy())


# ---------------------------------------------------------------------------
# Loss


def cosine_loss_tensor(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Mean over masked-in pixels of 1 - n . n'

    pred is (n, 3, h, w); target the same layout as an array; mask (n, h, w).
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape or mask.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ShapeError("cosine loss: pred {}, target {}, mask {}".format(pred.shape, target.shape, mask.shape))
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("cosine loss: no masked-in pixels")
    weight = mask[:, None, :, :].astype(pred.data.dtype)
    dots = np.sum(pred.data * target, axis=1)
    value = np.sum(np.where(mask, 1.0 - dots, 0.0)) / count

    def back(g):
        _send(pred, -g * target * weight / count)

    return _result(np.asarray(value, dtype=pred.data.dtype), (pred,), back)
