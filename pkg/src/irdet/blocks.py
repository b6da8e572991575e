"""Network building blocks over the autograd engine.

Every block is a ``Module`` owning parameter Tensors (and BN running
buffers).  Parameter traversal order is the attribute insertion order, which
makes initialization and checkpoint layout deterministic for a fixed seed.

Weight init: convolutions draw from a scaled normal (He-style fan-in), BN
starts at gamma=1 beta=0, and prediction biases are set by the head builder.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import BNStats, Tensor
from .errors import InvalidArgumentError

BN_MOMENTUM = 0.03
BN_EPS = 1e-3


class Module:
    """Minimal parameter container with recursive named traversal."""

    def named_params(self, prefix=""):
        for key, value in self.__dict__.items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_params(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}")

    def named_buffers(self, prefix=""):
        for key, value in self.__dict__.items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, BNStats):
                yield f"{name}.running_mean", value.mean
                yield f"{name}.running_var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}")

    def params(self):
        return [t for _, t in self.named_params()]

    def param_count(self):
        return int(sum(t.data.size for t in self.params()))

    def set_requires_grad(self, flag):
        for _, t in self.named_params():
            t.requires_grad = bool(flag)


def conv_init(rng, cout, cin, kh, kw):
    fan_in = cin * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return Tensor(
        (rng.standard_normal((cout, cin, kh, kw)) * std).astype(np.float32),
        requires_grad=True,
    )


class ConvBNAct(Module):
    """k x k convolution (bias-free), batch norm, then an activation.

    Padding is k//2 so spatial size only changes through the stride.
    """

    def __init__(self, rng, cin, cout, k=3, stride=1, act="silu"):
        self.weight = conv_init(rng, cout, cin, k, k)
        self.gamma = Tensor(np.ones(cout, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.stats = BNStats(cout)
        self.k = k
        self.stride = stride
        self.act = act
        self.cin = cin
        self.cout = cout

    def forward(self, x, training):
        out = ag.conv2d(x, self.weight, stride=self.stride, padding=self.k // 2)
        out = ag.batchnorm2d(out, self.gamma, self.beta, self.stats, training, BN_MOMENTUM, BN_EPS)
        return ag.activation(out, self.act)


class Bottleneck(Module):
    """Two 3x3 ConvBNAct layers with a residual connection."""

    def __init__(self, rng, c):
        self.cv1 = ConvBNAct(rng, c, c, k=3)
        self.cv2 = ConvBNAct(rng, c, c, k=3)

    def forward(self, x, training):
        return x + self.cv2.forward(self.cv1.forward(x, training), training)


class CSPBlock(Module):
    """Cross-stage partial block: split through 1x1 convs, run ``n``
    bottlenecks on one branch, concatenate, fuse with a 1x1."""

    def __init__(self, rng, cin, cout, n=1):
        hidden = cout // 2
        if hidden < 1:
            raise InvalidArgumentError(f"CSPBlock output {cout} too narrow to split")
        self.cv1 = ConvBNAct(rng, cin, hidden, k=1)
        self.cv2 = ConvBNAct(rng, cin, hidden, k=1)
        self.blocks = [Bottleneck(rng, hidden) for _ in range(n)]
        self.cv3 = ConvBNAct(rng, 2 * hidden, cout, k=1)
        self.cin = cin
        self.cout = cout
        self.n = n

    def forward(self, x, training):
        a = self.cv1.forward(x, training)
        for blk in self.blocks:
            a = blk.forward(a, training)
        b = self.cv2.forward(x, training)
        return self.cv3.forward(ag.concat_channels([a, b]), training)


class SPPF(Module):
    """Spatial pyramid pooling (fast): three chained 5x5 stride-1 max pools
    concatenated with the unpooled branch."""

    def __init__(self, rng, c, pool_k=5):
        hidden = c // 2
        self.cv1 = ConvBNAct(rng, c, hidden, k=1)
        self.cv2 = ConvBNAct(rng, hidden * 4, c, k=1)
        self.pool_k = pool_k
        self.cin = c
        self.cout = c

    def forward(self, x, training):
        y0 = self.cv1.forward(x, training)
        p = self.pool_k // 2
        y1 = ag.maxpool2d(y0, self.pool_k, 1, p)
        y2 = ag.maxpool2d(y1, self.pool_k, 1, p)
        y3 = ag.maxpool2d(y2, self.pool_k, 1, p)
        return self.cv2.forward(ag.concat_channels([y0, y1, y2, y3]), training)


class CoordAttention(Module):
    """Coordinate attention: factorized directional pooling plus gating.

    The input is mean-pooled along width (keeping an H profile) and along
    height (keeping a W profile).  Both profiles pass through one shared
    1x1 reduce conv + BN + silu at ``max(4, c // reduction)`` channels, are
    split back apart, and two per-direction 1x1 convs with sigmoid produce
    attention maps.  The output is x * gate_h * gate_w (broadcast), so the
    block preserves the channel count by construction.
    """

    def __init__(self, rng, c, reduction=8):
        cr = max(4, c // reduction)
        self.reduce = ConvBNAct(rng, c, cr, k=1, act="silu")
        self.h_gate = conv_init(rng, c, cr, 1, 1)
        self.h_gate_bias = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.w_gate = conv_init(rng, c, cr, 1, 1)
        self.w_gate_bias = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.c = c
        self.cr = cr
        self.reduction = reduction

    def forward(self, x, training):
        if x.data.shape[1] != self.c:
            raise InvalidArgumentError(
                f"coordinate attention built for {self.c} channels, got {x.data.shape[1]}"
            )
        n, c, h, w = x.data.shape
        # [N, C, H, 1]: profile over image rows; [N, C, 1, W]: over columns.
        ph = ag.pool_directional(x, "width")
        pw = ag.pool_directional(x, "height")
        # Stack the two profiles along the spatial axis so the reduce conv is
        # shared: [N, C, H + W, 1].
        stacked = ag.concat([ph, ag.swap_hw(pw)], axis=2)
        mid = self.reduce.forward(stacked, training)
        mh = ag.narrow(mid, 2, 0, h)
        mw = ag.swap_hw(ag.narrow(mid, 2, h, w))
        gate_h = ag.sigmoid(ag.conv2d(mh, self.h_gate, self.h_gate_bias))
        gate_w = ag.sigmoid(ag.conv2d(mw, self.w_gate, self.w_gate_bias))
        return x * gate_h * gate_w


def cascade_ca(x, blocks, training):
    """Apply coordinate attention blocks sequentially."""
    out = x
    for blk in blocks:
        out = blk.forward(out, training)
    return out
