"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds a :class:`Node` that remembers its inputs and a
closure mapping the output gradient to input gradients. Nodes carry a global
sequence number; since an op's inputs always exist before the op runs,
descending sequence order over the reachable nodes is a valid reverse
topological order. That ordered replay is the computation tape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_SEQ = itertools.count()


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn", "visits")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_SEQ)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.visits = 0


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> int:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    # A finite sum proves every entry finite; only a non-finite sum needs the full scan.
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = Node(op, inputs, backward_fn) if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> int:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Returns the number of graph nodes replayed. The graph is released
    afterwards, so a second call on the same graph raises.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return 0
        raise ContractError("loss does not depend on any tensor requiring grad")

    nodes: dict[int, Node] = {}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        if node.backward_fn is None:
            raise ContractError("graph already consumed by a previous backward(); re-run the forward pass")
        nodes[node.seq] = node
        for t in node.inputs:
            if t.node is not None and t.node.seq not in nodes:
                stack.append(t.node)

    grads: dict[int, np.ndarray] = {loss.node.seq: np.ones_like(loss.data)}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        g = grads.pop(seq, None)
        node.visits += 1
        if g is not None:
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                elif t.node.seq in grads:
                    grads[t.node.seq] = grads[t.node.seq] + gi
                else:
                    grads[t.node.seq] = gi
        node.backward_fn = None
    return len(nodes)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NumericError("log of a non-positive value")
    return _result("log", np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    return _result("clamp", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp along ``axis`` (axis is dropped)."""
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    shifted = np.exp(ad - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (m + np.log(total)).squeeze(axis)
    soft = shifted / total

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _result("logsumexp", out, (a,), bw)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[b, j] = a[b, index[b, j]]`` for 2-D ``a``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(f"gather expects a[B,N] and index[B,k], got {a.shape} and {index.shape}")
    rows = np.arange(a.shape[0])[:, None]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (np.broadcast_to(rows, index.shape), index), g)
        return (full,)

    return _result("gather", a.data[rows, index], (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# convolutional primitives


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigError(
            f"non-integral conv output: (size {size} + 2*pad {padding} - kernel {kernel}) "
            f"is not divisible by stride {stride}")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[K,C,R,S]`` via im2col.

    Columns are laid out tap-major, ``(R*S*C) x (N*H'*W')``, gathered from a
    channel-major copy of the input so every tap is one strided slice.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d channel/rank mismatch: input {x.shape}, weight {w.shape}")
    n, c, h, wd = x.shape
    k, _, r, s = w.shape
    ho = conv_output_size(h, r, stride, padding)
    wo = conv_output_size(wd, s, stride, padding)
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((r, s, c, n, ho, wo))
    for i in range(r):
        for j in range(s):
            cols[i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(r * s * c, n * ho * wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(k, r * s * c)
    out = (wmat @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    padded_shape = xt.shape

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        dw = None
        if w.requires_grad:
            dw = (gm @ cols.T).reshape(k, r, s, c).transpose(0, 3, 1, 2)
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(r, s, c, n, ho, wo)
            dxt = np.zeros(padded_shape)
            for i in range(r):
                for j in range(s):
                    dxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
            if padding:
                dxt = dxt[:, :, padding:padding + h, padding:padding + wd]
            dx = dxt.transpose(1, 0, 2, 3)
        return dx, dw

    return _result("conv2d", np.ascontiguousarray(out), (x, w), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        return (np.broadcast_to((g / area)[:, :, None, None], (n, c, h, w)).copy(),)

    return _result("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), bw)


def channel_mul(x: Tensor, gate: Tensor) -> Tensor:
    """``x[N,C,H,W] * gate[N,C]`` broadcast over the spatial extent."""
    if gate.shape != x.shape[:2]:
        raise DimensionError(f"gate {gate.shape} does not match feature {x.shape}")
    return mul(x, reshape(gate, gate.shape + (1, 1)))


BN_EPS = 1e-5


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization on ``N x C x H x W``.

    Training mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm expects N x C x H x W with C={gamma.shape}, got {x.shape}")
    axes = (0, 2, 3)
    xd = x.data
    bshape = (1, -1, 1, 1)
    if training:
        if x.shape[0] < 2:
            raise ContractError("batchnorm in training mode needs a batch of at least 2")
        count = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data
    out = xhat * gd.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd.reshape(bshape)
        if training:
            m = xd.size // xd.shape[1]
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _result("batchnorm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             exclude_decay_set: Iterable[int] = (), velocity: Optional[list] = None,
             nesterov: bool = True) -> list:
    """One in-place SGD step with Nesterov momentum.

    ``exclude_decay_set`` holds positions in ``params`` that skip weight
    decay. ``velocity`` is the per-parameter momentum buffer list (created
    when ``None``) and is returned so callers can carry it across steps.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    skip = set(exclude_decay_set)
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} does not match param shape {p.shape}")
        d = g + weight_decay * p.data if weight_decay and i not in skip else g
        if momentum:
            v = velocity[i]
            v *= momentum
            v += d
            d = d + momentum * v if nesterov else v
        p.data -= lr * d
    return velocity
