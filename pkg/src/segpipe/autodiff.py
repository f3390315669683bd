"""Reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Node` holding the forward value and, when any
input requires a gradient, a closure mapping the upstream gradient to one
gradient per input. :func:`backward` walks the recorded graph in reverse
topological order and accumulates into leaf ``.grad`` buffers (``+=``, never
overwrite), so two backward passes without zeroing double every gradient.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor

_grad_enabled = True


@contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "parents", "backward_fn", "op", "requires_grad", "grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def tensor(self) -> Tensor:
        return Tensor(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


class Parameter(Node):
    """Trainable leaf with a preallocated gradient buffer of the same shape."""

    __slots__ = ("name", "trainable", "decay_exempt")

    def __init__(self, value, name="", trainable=True, decay_exempt=False):
        value = value.data if isinstance(value, Tensor) else value
        super().__init__(np.ascontiguousarray(value), op="param", requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.decay_exempt = decay_exempt
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def variable(x, requires_grad=True) -> Node:
    """Wrap an array (or Tensor) as a graph leaf."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Node(x, requires_grad=requires_grad)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return variable(x, requires_grad=False)


def _result(value, parents, backward_fn, op):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, op, True)
    return Node(value, op=op)


def _topo_order(root: Node) -> list[Node]:
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        assert mark != 1, "cycle in computation graph"
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and state.get(id(p)) != 2:
                stack.append((p, False))
    return order


def backward(root: Node, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if seed is None:
        if root.value.size != 1:
            raise ValueError("backward from a non-scalar root needs a seed gradient")
        seed = np.ones_like(root.value)
    seed = np.asarray(seed, dtype=root.value.dtype)
    if seed.shape != root.value.shape:
        raise ShapeError(f"seed shape {seed.shape} != root shape {root.value.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): seed}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad += g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg


# ---------------------------------------------------------------------------
# convolution


def conv_padding(kh: int, kw: int, padding) -> tuple[int, int, int, int]:
    """(top, bottom, left, right). ``same`` puts the odd pixel of an even kernel at the end."""
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "same":
        return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2
    p = int(padding)
    return p, p, p, p


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding) -> tuple[int, int]:
    pt, pb, pl, pr = conv_padding(kh, kw, padding)
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")
    return (h + pt + pb - kh) // stride + 1, (w + pl + pr - kw) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding="same") -> Node:
    """2D cross-correlation, im2col style via a strided window view."""
    x, weight = as_node(x), as_node(weight)
    X, Wt = x.value, weight.value
    if X.ndim != 4 or Wt.ndim != 4:
        raise ShapeError("conv2d expects x [B,C,H,W] and weight [O,C,kh,kw]")
    B, C, H, W = X.shape
    O, Ci, kh, kw = Wt.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    s = stride
    Ho, Wo = conv_output_hw(H, W, kh, kw, s, padding)
    pt, pb, pl, pr = conv_padding(kh, kw, padding)
    pointwise = kh == 1 and kw == 1 and not (pt or pb or pl or pr)

    if pointwise:
        win = X[:, :, ::s, ::s]
        out = np.tensordot(Wt[:, :, 0, 0], win, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        Xp = np.pad(X, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else X
        win = sliding_window_view(Xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        out = np.tensordot(win, Wt, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    parents = (x, weight)
    if bias is not None:
        bias = as_node(bias)
        out += bias.value.reshape(1, O, 1, 1)
        parents = parents + (bias,)

    def backward_fn(g):
        if g.shape != out.shape:
            raise ShapeError(f"upstream gradient {g.shape} != conv output {out.shape}")
        gx = gw = None
        if pointwise:
            if weight.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if x.requires_grad:
                gwin = np.tensordot(Wt[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                if s == 1:
                    gx = np.ascontiguousarray(gwin)
                else:
                    gx = np.zeros_like(X)
                    gx[:, :, ::s, ::s] = gwin
        else:
            if weight.requires_grad:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gcols = np.tensordot(g, Wt, axes=([1], [0]))  # [B,Ho,Wo,C,kh,kw]
                gxp = np.zeros((B, C, H + pt + pb, W + pl + pr), dtype=X.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pt:pt + H, pl:pl + W]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _result(out, parents, backward_fn, "conv2d")


def conv2d_reference(x, weight, bias=None, stride: int = 1, padding="same") -> np.ndarray:
    """Direct-loop convolution used as the semantic oracle for :func:`conv2d`."""
    X = np.asarray(x.value if isinstance(x, Node) else x)
    Wt = np.asarray(weight.value if isinstance(weight, Node) else weight)
    B, C, H, W = X.shape
    O, _, kh, kw = Wt.shape
    Ho, Wo = conv_output_hw(H, W, kh, kw, stride, padding)
    pt, pb, pl, pr = conv_padding(kh, kw, padding)
    Xp = np.zeros((B, C, H + pt + pb, W + pl + pr), dtype=np.float64)
    Xp[:, :, pt:pt + H, pl:pl + W] = X
    out = np.zeros((B, O, Ho, Wo), dtype=np.float64)
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    r, c = i * stride, j * stride
                    out[b, o, i, j] = np.sum(Xp[b, :, r:r + kh, c:c + kw] * Wt[o])
    if bias is not None:
        bv = np.asarray(bias.value if isinstance(bias, Node) else bias)
        out += bv.reshape(1, O, 1, 1)
    return out.astype(X.dtype)


# ---------------------------------------------------------------------------
# resampling


def maxpool2(x) -> Node:
    """2x2 max pooling, stride 2. Odd extents are padded with -inf.

    Ties go to the first maximum in row-major window order.
    """
    x = as_node(x)
    X = x.value
    B, C, H, W = X.shape
    He, We = H + H % 2, W + W % 2
    Xe = X
    if (He, We) != (H, W):
        Xe = np.pad(X, ((0, 0), (0, 0), (0, He - H), (0, We - W)), constant_values=-np.inf)
    H2, W2 = He // 2, We // 2
    win = Xe.reshape(B, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H2, W2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = (np.arange(4) == idx[..., None]) * g[..., None]
        gx = routed.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, He, We)
        return (np.ascontiguousarray(gx[:, :, :H, :W]).astype(X.dtype, copy=False),)

    return _result(out, (x,), backward_fn, "maxpool2")


def upsample2(x) -> Node:
    """Nearest-neighbour 2x upsampling (each pixel becomes a 2x2 block)."""
    x = as_node(x)
    X = x.value
    B, C, H, W = X.shape
    out = np.broadcast_to(X[:, :, :, None, :, None], (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)

    def backward_fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward_fn, "upsample2")


# ---------------------------------------------------------------------------
# normalisation and pointwise


class RunningStats:
    """Per-channel moving averages kept by a batch-norm layer (None until recorded)."""

    def __init__(self):
        self.mean = None
        self.var = None

    @property
    def recorded(self) -> bool:
        return self.mean is not None


def batchnorm(x, gamma, beta, train: bool, running: RunningStats | None = None,
              momentum: float = 0.1, eps: float = 1e-5) -> Node:
    """Per-channel batch normalisation over (batch, height, width).

    Train mode uses the biased batch variance and folds the batch statistics
    into ``running`` by EMA (unbiased variance, PyTorch convention, starting
    from mean 0 / var 1). Eval mode uses ``running`` and fails if it was never
    recorded.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    X = x.value
    B, C, H, W = X.shape
    if gamma.value.shape != (C,) or beta.value.shape != (C,):
        raise ShapeError(f"batchnorm: expected gamma/beta of shape ({C},)")
    G = gamma.value.reshape(1, C, 1, 1)
    axes = (0, 2, 3)
    n = B * H * W

    if train:
        if n < 2:
            raise ValueError("batchnorm train mode needs at least 2 values per channel")
        mu = X.mean(axis=axes, keepdims=True)
        xc = X - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running is not None:
            if running.mean is None:
                running.mean = np.zeros(C, dtype=X.dtype)
                running.var = np.ones(C, dtype=X.dtype)
            running.mean = ((1 - momentum) * running.mean + momentum * mu.ravel()).astype(X.dtype)
            running.var = ((1 - momentum) * running.var + momentum * var.ravel() * (n / (n - 1))).astype(X.dtype)
    else:
        if running is None or not running.recorded:
            raise RuntimeError("batchnorm eval mode before any running statistics were recorded")
        inv = (1.0 / np.sqrt(running.var + eps)).astype(X.dtype).reshape(1, C, 1, 1)
        xhat = (X - running.mean.reshape(1, C, 1, 1)) * inv

    out = G * xhat + beta.value.reshape(1, C, 1, 1)

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * G
        if train:
            gx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward_fn, "batchnorm")


def relu(x) -> Node:
    """max(0, x); the gradient at exactly 0 is 0."""
    x = as_node(x)
    mask = x.value > 0
    out = np.where(mask, x.value, 0).astype(x.value.dtype)

    def backward_fn(g):
        return (g * mask,)

    return _result(out, (x,), backward_fn, "relu")


def sigmoid(x) -> Node:
    x = as_node(x)
    out = expit(x.value)

    def backward_fn(g):
        return (g * out * (1 - out),)

    return _result(out, (x,), backward_fn, "sigmoid")


def dropout(x, rate: float, train: bool, rng=None) -> Node:
    """Inverted dropout: zero with prob ``rate``, scale survivors by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_node(x)
    if not train or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.value.shape) >= rate).astype(x.value.dtype) / (1 - rate)
    out = x.value * keep

    def backward_fn(g):
        return (g * keep,)

    return _result(out, (x,), backward_fn, "dropout")


def concat_channels(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    A, Bv = a.value, b.value
    if A.shape[0] != Bv.shape[0] or A.shape[2:] != Bv.shape[2:]:
        raise ShapeError(f"concat: incompatible shapes {A.shape} and {Bv.shape}")
    ca = A.shape[1]
    out = np.concatenate([A, Bv], axis=1)

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return _result(out, (a, b), backward_fn, "concat")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes differ {a.value.shape} vs {b.value.shape}")
    out = a.value + b.value

    def backward_fn(g):
        return g, g

    return _result(out, (a, b), backward_fn, "add")


def total(x) -> Node:
    """Sum of all elements as a [1] node."""
    x = as_node(x)
    shape = x.value.shape

    def backward_fn(g):
        return (np.broadcast_to(g.reshape(()), shape),)

    return _result(np.asarray(x.value.sum(), dtype=x.value.dtype).reshape(1), (x,), backward_fn, "sum")


def weighted_total(x, weights) -> Node:
    """sum(x * weights) for a constant weight array; handy for probing gradients."""
    x = as_node(x)
    w = np.asarray(weights, dtype=x.value.dtype)
    if w.shape != x.value.shape:
        raise ShapeError("weights must match x")

    def backward_fn(g):
        return (g.reshape(()) * w,)

    return _result(np.asarray((x.value * w).sum(), dtype=x.value.dtype).reshape(1), (x,), backward_fn, "wsum")
