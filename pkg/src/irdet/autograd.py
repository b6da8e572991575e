"""Reverse-mode automatic differentiation over numpy arrays.

Tensors wrap row-major numpy arrays (float32 by default) and record a DAG of
operations.  ``backward`` walks the graph in reverse topological order and
accumulates gradients into ``Tensor.grad``.  Ops follow numpy's dtype
promotion, so a graph seeded with a float64 leaf runs end to end in float64;
``grad_check`` relies on this to get finite differences with usable precision.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_DTYPE = np.float32

# Debug builds verify that every op output is finite.  Costs a full pass over
# each intermediate, so it is off unless explicitly enabled.
_DEBUG_FINITE = os.environ.get("IRDET_DEBUG", "") not in ("", "0")


def set_debug_checks(enabled):
    """Toggle per-op NaN/Inf output checks."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class Tensor:
    """A numpy array plus an optional gradient and backward closure.

    ``data`` is treated as immutable once the tensor participates in a graph;
    optimizers mutate leaf data in place only between graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise InvalidArgumentError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions below do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _node(data, parents, backward, op_name):
    """Build a graph node; drops the closure when no parent needs grad."""
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op '{op_name}'")
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # Fresh array so later accumulation can never alias a sibling's grad.
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Run reverse-mode accumulation from a scalar ``loss``.

    Gradients add into ``.grad`` of every reachable tensor with
    ``requires_grad``; repeated calls accumulate unless grads are cleared.
    """
    if not isinstance(loss, Tensor):
        raise InvalidArgumentError("backward expects a Tensor")
    if loss.data.size != 1:
        raise InvalidArgumentError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    if not loss.requires_grad:
        return

    # Iterative post-order DFS; recursion would overflow on deep graphs.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # Each call computes a fresh flow and then adds it onto whatever was in
    # .grad before, so repeated backward calls accumulate at every node.
    prior = {}
    for node in topo:
        if node.grad is not None:
            prior[id(node)] = node.grad
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.grad is None:
            continue
        if node._backward is not None:
            node._backward(node.grad)
    for node in topo:
        old = prior.get(id(node))
        if old is not None:
            node.grad = old if node.grad is None else node.grad + old


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), bwd, "div")


def power(a, p):
    """Elementwise ``a ** p`` for a constant (non-Tensor) exponent."""
    if isinstance(p, Tensor):
        raise InvalidArgumentError("power exponent must be a constant")
    a = _as_tensor(a)
    p = float(p)
    data = a.data**p

    def bwd(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _node(data, (a,), bwd, "power")


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g * 0.5 / data)

    return _node(data, (a,), bwd, "sqrt")


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * data)

    return _node(data, (a,), bwd, "exp")


def log(a):
    a = _as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _node(data, (a,), bwd, "log")


def arctan(a):
    a = _as_tensor(a)
    data = np.arctan(a.data)

    def bwd(g):
        _accumulate(a, g / (1.0 + a.data * a.data))

    return _node(data, (a,), bwd, "arctan")


def minimum(a, b):
    """Elementwise min; at ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = np.minimum(a.data, b.data)

    def bwd(g):
        take_a = a.data <= b.data
        _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _node(data, (a, b), bwd, "minimum")


def maximum(a, b):
    """Elementwise max; at ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = np.maximum(a.data, b.data)

    def bwd(g):
        take_a = a.data >= b.data
        _accumulate(a, _unbroadcast(g * take_a, a.data.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _node(data, (a, b), bwd, "maximum")


def clamp_max(a, hi):
    return minimum(a, float(hi))


def relu(a):
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0.0))

    return _node(data, (a,), bwd, "relu")


def sigmoid(a):
    a = _as_tensor(a)
    # Two-branch form stays finite for large |x| in either direction.
    x = a.data
    data = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def bwd(g):
        _accumulate(a, g * data * (1.0 - data))

    return _node(data, (a,), bwd, "sigmoid")


def silu(a):
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    s = s.astype(x.dtype, copy=False)
    data = x * s

    def bwd(g):
        _accumulate(a, g * (s + x * s * (1.0 - s)))

    return _node(data, (a,), bwd, "silu")


def softplus(a):
    """log(1 + exp(x)) computed as max(x,0) + log1p(exp(-|x|))."""
    a = _as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accumulate(a, g * s.astype(x.dtype, copy=False))

    return _node(data, (a,), bwd, "softplus")


def activation(a, kind):
    """Dispatch by name; unknown kinds raise InvalidArgumentError."""
    if kind == "silu":
        return silu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return relu(a)
    if kind == "identity":
        return _as_tensor(a)
    raise InvalidArgumentError(f"unknown activation kind '{kind}'")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(data, (a,), bwd, "reshape")


def swap_hw(a):
    """Swap the trailing two axes of an NCHW tensor."""
    a = _as_tensor(a)
    data = np.ascontiguousarray(a.data.swapaxes(-1, -2))

    def bwd(g):
        _accumulate(a, g.swapaxes(-1, -2))

    return _node(data, (a,), bwd, "swap_hw")


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(data, tuple(tensors), bwd, "concat")


def concat_channels(tensors):
    return concat(tensors, axis=1)


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` elements along ``axis``."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _node(data, (a,), bwd, "narrow")


def gather_cells(a, n_idx, y_idx, x_idx):
    """Pick cells from an NCHW map; returns [K, C] rows in index order."""
    a = _as_tensor(a)
    n_idx = np.asarray(n_idx, dtype=np.int64)
    y_idx = np.asarray(y_idx, dtype=np.int64)
    x_idx = np.asarray(x_idx, dtype=np.int64)
    if not (n_idx.shape == y_idx.shape == x_idx.shape):
        raise InvalidArgumentError("gather_cells index arrays must share a shape")
    data = np.ascontiguousarray(a.data[n_idx, :, y_idx, x_idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        C = a.data.shape[1]
        np.add.at(
            full,
            (n_idx[:, None], np.arange(C)[None, :], y_idx[:, None], x_idx[:, None]),
            g,
        )
        _accumulate(a, full)

    return _node(data, (a,), bwd, "gather_cells")


# ---------------------------------------------------------------------------
# spatial ops


def _conv_out_hw(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIHW weights.

    Forward lowers to one GEMM over im2col patches; backward accumulates
    shifted GEMMs per kernel tap, which avoids keeping the patch matrix
    alive between passes.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise InvalidArgumentError("conv2d expects NCHW input and OIHW weights")
    N, C, H, W = x.data.shape
    Co, Ci, kh, kw = w.data.shape
    if Ci != C:
        raise InvalidArgumentError(
            f"conv2d channel mismatch: input has {C}, weights expect {Ci}"
        )
    if stride < 1:
        raise InvalidArgumentError(f"conv2d stride must be >= 1, got {stride}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise InvalidArgumentError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {H + 2 * padding}x{W + 2 * padding}"
        )
    OH, OW = _conv_out_hw(H, W, kh, kw, stride, padding)

    def _pad(arr):
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
        cols = xs.reshape(N, C, OH * OW)
        out = np.matmul(w.data.reshape(Co, C), cols)
    else:
        xp = _pad(x.data)
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, OH * OW)
        out = np.matmul(w.data.reshape(Co, C * kh * kw), cols)
    out = out.reshape(N, Co, OH, OW)
    if b is not None:
        out = out + b.data.reshape(1, Co, 1, 1)

    def bwd(g):
        gf = g.reshape(N, Co, OH * OW)
        if x.requires_grad:
            dxp = np.zeros(
                (N, C, H + 2 * padding, W + 2 * padding),
                dtype=np.promote_types(g.dtype, w.data.dtype),
            )
            wt = w.data.reshape(Co, C, kh * kw)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.matmul(wt[:, :, i * kw + j].T, gf)
                    dxp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride] += contrib.reshape(
                        N, C, OH, OW
                    )
            dx = dxp[:, :, padding : padding + H, padding : padding + W]
            _accumulate(x, np.ascontiguousarray(dx))
        if w.requires_grad:
            xp = _pad(x.data)
            dw = np.zeros((Co, C, kh, kw), dtype=np.promote_types(g.dtype, x.data.dtype))
            for i in range(kh):
                for j in range(kw):
                    sub = xp[:, :, i : i + stride * OH : stride, j : j + stride * OW : stride]
                    sub = sub.reshape(N, C, OH * OW)
                    dw[:, :, i, j] = np.matmul(gf, sub.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, dw)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bwd, "conv2d")


class BNStats:
    """Running mean/variance buffers for batch normalization."""

    __slots__ = ("mean", "var")

    def __init__(self, channels, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x, gamma, beta, stats, training, momentum=0.03, eps=1e-3):
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics normalize the input and the running
    buffers update in place with ``(1 - momentum) * old + momentum * new``;
    in eval mode the running buffers normalize and nothing mutates.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise InvalidArgumentError("batchnorm2d expects an NCHW tensor")
    N, C, H, W = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise InvalidArgumentError("batchnorm2d parameter shape mismatch")
    m = N * H * W

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean[:] = (1.0 - momentum) * stats.mean + momentum * mean
        stats.var[:] = (1.0 - momentum) * stats.var + momentum * var
    else:
        mean = stats.mean
        var = stats.var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    out = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)

    def bwd(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = g * gamma.data.reshape(1, C, 1, 1)
            if training:
                # Batch stats depend on x, so the gradient couples all
                # positions within a channel.
                gi_sum = gi.sum(axis=(0, 2, 3), keepdims=True)
                gix_sum = (gi * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv.reshape(1, C, 1, 1) / m) * (m * gi - gi_sum - xhat * gix_sum)
            else:
                dx = gi * inv.reshape(1, C, 1, 1)
            _accumulate(x, dx)

    return _node(out, (x, gamma, beta), bwd, "batchnorm2d")


def maxpool2d(x, kernel, stride=1, padding=0):
    """Max pooling; gradient flows to the first maximal element per window."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise InvalidArgumentError("maxpool2d expects an NCHW tensor")
    N, C, H, W = x.data.shape
    if H + 2 * padding < kernel or W + 2 * padding < kernel:
        raise InvalidArgumentError("maxpool2d window exceeds padded input")
    OH, OW = _conv_out_hw(H, W, kernel, kernel, stride, padding)
    if padding:
        xp = np.pad(
            x.data,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=-np.inf,
        )
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(N, C, OH, OW, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dxp = np.zeros_like(xp, dtype=g.dtype)
        ky, kx = np.unravel_index(arg.reshape(-1), (kernel, kernel))
        ns, cs, ys, xs = np.indices((N, C, OH, OW)).reshape(4, -1)
        rows = ys * stride + ky
        cols = xs * stride + kx
        np.add.at(dxp, (ns, cs, rows, cols), g.reshape(-1))
        if padding:
            dxp = dxp[:, :, padding : padding + H, padding : padding + W]
        _accumulate(x, dxp)

    return _node(np.ascontiguousarray(out), (x,), bwd, "maxpool2d")


def pool_directional(x, axis):
    """Mean-pool spatially along one axis, keeping it with size 1.

    axis='height' averages over H giving [N, C, 1, W]; axis='width'
    averages over W giving [N, C, H, 1].
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise InvalidArgumentError("pool_directional expects an NCHW tensor")
    if axis == "height":
        ax = 2
    elif axis == "width":
        ax = 3
    else:
        raise InvalidArgumentError(f"pool_directional axis must be 'height' or 'width', got '{axis}'")
    n = x.data.shape[ax]
    data = x.data.mean(axis=ax, keepdims=True)

    def bwd(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape))

    return _node(data, (x,), bwd, "pool_directional")


def upsample_nearest2x(x):
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise InvalidArgumentError("upsample_nearest2x expects an NCHW tensor")
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        N, C, H2, W2 = g.shape
        gsum = g.reshape(N, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5))
        _accumulate(x, gsum)

    return _node(data, (x,), bwd, "upsample_nearest2x")


# ---------------------------------------------------------------------------
# numerical gradient verification


def grad_check(fn, point, eps=1e-3):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps one Tensor to a scalar Tensor.  The point is promoted to
    float64 before both passes so the finite differences are not drowned by
    single-precision rounding; parameters inside ``fn`` may stay float32.
    Relative error per coordinate is |analytic - numeric| / max(1e-8, |numeric|).
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = fn(leaf)
    if out.data.size != 1:
        raise InvalidArgumentError("grad_check requires a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else np.asarray(leaf.grad, dtype=np.float64)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(Tensor(base.copy())).data.item()
        flat[i] = orig - eps
        lo = fn(Tensor(base.copy())).data.item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(base.shape)

    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
