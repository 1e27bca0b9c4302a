"""Minimal dense tensor with reverse-mode automatic differentiation.

Covers exactly the operations the segmentation network and its losses
need: 2d convolution, max pooling, nearest-neighbour upsampling, channel
concatenation, channel softmax, cross entropy, dropout, and the
elementwise math used by the variational head (exp/log/sqrt/softplus).

Everything is float64. Ops allocate fresh outputs; tensors in a live
graph are never mutated in place. Every op output is checked for
finiteness; NaN/Inf raises NumericError instead of propagating.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, UsageError


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """N-d float64 array, optionally tracked for reverse-mode autodiff.

    A tensor produced by an op keeps references to its parents and a
    closure computing the parents' gradient contributions; `backward`
    on a scalar loss walks that implicit graph in reverse topological
    order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward_fn=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, _op)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    # -- backward ------------------------------------------------------

    def backward(self):
        """Populate .grad of every requires_grad tensor reachable from self.

        Only valid on scalar tensors. A graph may be consumed once;
        calling backward again through the same root raises UsageError.
        """
        if self.data.size != 1:
            raise UsageError("backward requires a scalar root tensor")
        if self._op == "consumed":
            raise UsageError("backward already ran on this graph; rebuild the graph first")

        topo = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is not None:
                for parent, pg in node._backward_fn(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        self._op = "consumed"


def _toposort(root: Tensor):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _make(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    if req:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn, _op=op)
    return Tensor(data, _op=op)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bw(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(out, (a, b), bw, "mul")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g.reshape(shape)


def power(a: Tensor, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** p

    def bw(g):
        return ((a, g * p * a.data ** (p - 1)),)

    return _make(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return ((a, g * out),)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)

    return _make(out, (a,), bw, "log")


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root with subgradient 0 at exactly 0."""
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        d = np.zeros_like(a.data)
        nz = a.data > 0
        d[nz] = g[nz] * 0.5 / out[nz]
        return ((a, d),)

    return _make(out, (a,), bw, "sqrt")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return ((a, g * (a.data > 0)),)

    return _make(out, (a,), bw, "relu")


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), overflow-safe (identity branch for large x)."""
    a = _as_tensor(a)
    x = a.data
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))

    def bw(g):
        sig = np.where(x > 30.0, 1.0, 1.0 / (1.0 + np.exp(-np.minimum(x, 30.0))))
        return ((a, g * sig),)

    return _make(out, (a,), bw, "softplus")


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.array(a.data.sum())

    def bw(g):
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(out, (a,), bw, "sum")


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.array(a.data.mean())

    def bw(g):
        return ((a, np.broadcast_to(g / n, a.shape).copy()),)

    return _make(out, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return ((a, g.reshape(a.shape)),)

    return _make(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return ((a, g.transpose(inv)),)

    return _make(out, (a,), bw, "transpose")


# -- network ops -------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2d convolution (cross-correlation) over NCHW input.

    kernel: (Cout, Cin, kh, kw); bias: (Cout,). Output spatial extents
    must be integral for the given padding/stride.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4d input and kernel")
    n, cin, h, w = x.shape
    cout, ck, kh, kw = kernel.shape
    if ck != cin:
        raise DimensionError(f"conv2d: kernel expects {ck} input channels, input has {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError("conv2d: kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise DimensionError("conv2d: non-integral output extent for given padding/stride")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, kernel.data, optimize=True) + bias.data[None, :, None, None]

    def bw(g):
        out_grads = []
        if x.requires_grad:
            if stride == 1:
                # input grad = full correlation of g with the flipped kernel
                kf = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1])
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gxp = np.einsum("nohwij,ocij->nchw", gwin, kf, optimize=True)
            else:
                gcols = np.einsum("nohw,ocij->nhwcij", g, kernel.data, optimize=True)
                gxp = np.zeros((n, cin, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
            out_grads.append((x, gx))
        if kernel.requires_grad:
            out_grads.append((kernel, np.einsum("nchwij,nohw->ocij", win, g, optimize=True)))
        if bias.requires_grad:
            out_grads.append((bias, g.sum(axis=(0, 2, 3))))
        return tuple(out_grads)

    return _make(out, (x, kernel, bias), bw, "conv2d")


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Max pooling with square non-overlapping windows.

    Ties route the gradient to the first (lowest linear index) maximum.
    """
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"max_pool2d: extents {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    r = x.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gr = np.zeros((n, c, ho, wo, window * window))
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gx = gr.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return ((x, gx),)

    return _make(out, (x,), bw, "max_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        gx = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        return ((x, gx),)

    return _make(out, (x,), bw, "upsample_nearest")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise DimensionError(f"concat_channels: spatial mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return ((a, g[:, :ca]), (b, g[:, ca:]))

    return _make(out, (a, b), bw, "concat_channels")


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-shifted for stability."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise DimensionError("softmax_channels expects (N,K,H,W) with K >= 2")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((logits, (g - dot) * out),)

    return _make(out, (logits,), bw, "softmax_channels")


def cross_entropy(probs: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log(prob at the target class id)."""
    probs = _as_tensor(probs)
    n, k, h, w = probs.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise DimensionError(f"cross_entropy: target shape {target.shape} != {(n, h, w)}")
    if not np.issubdtype(target.dtype, np.integer):
        raise DimensionError("cross_entropy: target must be integer class ids")
    if target.min() < 0 or target.max() >= k:
        from .errors import DataError

        raise DataError(f"cross_entropy: class ids must lie in [0, {k - 1}]")
    t = target[:, None, :, :]
    pt = np.take_along_axis(probs.data, t, axis=1)
    npix = n * h * w
    out = np.array(-np.log(pt).sum() / npix)

    def bw(g):
        gp = np.zeros_like(probs.data)
        np.put_along_axis(gp, t, -float(g) / (npix * pt), axis=1)
        return ((probs, gp),)

    return _make(out, (probs,), bw, "cross_entropy")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, active: bool = True) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) while active."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise DimensionError(f"dropout rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        def bw_id(g):
            return ((x, g),)

        return _make(x.data.copy(), (x,), bw_id, "dropout(identity)")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = x.data * mask

    def bw(g):
        return ((x, g * mask),)

    return _make(out, (x,), bw, "dropout")
