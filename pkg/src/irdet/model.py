"""Detector graph: configuration, assembly, forward, cost accounting, trim.

The network is a stride-aware one-class detector over grayscale images:

* backbone: stem conv (stride 1 or 2), four stride-2 downsample convs each
  followed by a cross-stage partial block, and a pyramid pooling block on
  the deepest map,
* top-down neck: nearest-2x upsampling + concat + CSP fusion producing
  feature maps T4, T3 and (optionally) the high-resolution T2,
* a cascade of coordinate attention blocks on the T2 branch feeding the P2
  head (the bottom-up path taps T2 before attention, so the P2 branch never
  depends on it),
* bottom-up path aggregation re-downsampling T2 across the coarser levels,
* one prediction head per active level, each a 3x3 reduce conv plus a 1x1
  projection to (tx, ty, tw, th, obj, classes).

The graph is a flat list of named records evaluated in order; trimming a
model keeps exactly the records reachable from the surviving heads, which is
why a P2-only model reproduces the full model's P2 output bit for bit.

With the stem at stride 1 the head strides are {P2: 2, P3: 4, P4: 8,
P5: 16}; a stride-2 stem doubles all of them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .blocks import CSPBlock, ConvBNAct, CoordAttention, Module, SPPF, conv_init
from .errors import ConfigError, InvalidArgumentError

HEAD_ORDER = ("P2", "P3", "P4", "P5")
HEAD_STRIDE_FACTOR = {"P2": 2, "P3": 4, "P4": 8, "P5": 16}
PAN_MODES = ("full", "partial", "identity")
OBJ_PRIOR = 0.01  # initial objectness probability -> bias log(p/(1-p))


@dataclass(frozen=True)
class ModelConfig:
    stem_stride: int = 1
    width_multiple: float = 1.0
    stage_channels: tuple = (16, 32, 64, 128, 256)
    enable_p2_head: bool = True
    ca_blocks_on_p2: int = 3
    active_heads: tuple = ("P2", "P3", "P4", "P5")
    pan_mode: str = "full"
    num_classes: int = 1

    def validate(self):
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if not (self.width_multiple > 0):
            raise ConfigError(f"width_multiple must be positive, got {self.width_multiple}")
        if len(self.stage_channels) != 5 or any(c < 8 for c in self.stage_channels):
            raise ConfigError("stage_channels must be five integers >= 8")
        if self.ca_blocks_on_p2 < 0:
            raise ConfigError("ca_blocks_on_p2 must be >= 0")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        heads = tuple(self.active_heads)
        if not heads:
            raise ConfigError("active_heads must not be empty")
        if any(h not in HEAD_ORDER for h in heads):
            raise ConfigError(f"unknown head in active_heads: {heads}")
        if len(set(heads)) != len(heads):
            raise ConfigError("active_heads contains duplicates")
        if self.pan_mode not in PAN_MODES:
            raise ConfigError(f"pan_mode must be one of {PAN_MODES}, got '{self.pan_mode}'")
        if ("P2" in heads) != self.enable_p2_head:
            raise ConfigError("enable_p2_head must match the presence of P2 in active_heads")
        if self.pan_mode == "identity" and set(heads) - {"P2"}:
            raise ConfigError("pan_mode 'identity' supports only the P2 head")
        if self.pan_mode == "partial" and set(heads) - {"P2", "P3"}:
            raise ConfigError("pan_mode 'partial' supports only P2 and P3 heads")
        if self.pan_mode != "full" and not self.enable_p2_head:
            raise ConfigError(f"pan_mode '{self.pan_mode}' requires the P2 branch")
        if {"P4", "P5"} & set(heads) and self.pan_mode != "full":
            raise ConfigError("P4/P5 heads require pan_mode 'full'")
        # The mode must be fully used by some head, otherwise part of the
        # bottom-up path would dangle and the config would misdescribe the
        # built structure.
        if self.pan_mode == "full" and "P5" not in heads:
            raise ConfigError("pan_mode 'full' requires the P5 head")
        if self.pan_mode == "partial" and "P3" not in heads:
            raise ConfigError("pan_mode 'partial' requires the P3 head")
        return self

    def channels(self):
        """Stage widths after applying the width multiple (floor 8, even)."""
        out = []
        for c in self.stage_channels:
            w = int(round(c * self.width_multiple / 2.0) * 2)
            out.append(max(8, w))
        return tuple(out)

    def head_strides(self):
        return {h: self.stem_stride * HEAD_STRIDE_FACTOR[h] for h in self.active_heads}

    def sorted_heads(self):
        return tuple(h for h in HEAD_ORDER if h in self.active_heads)


_CONFIG_FIELDS = (
    "stem_stride",
    "width_multiple",
    "stage_channels",
    "enable_p2_head",
    "ca_blocks_on_p2",
    "active_heads",
    "pan_mode",
    "num_classes",
)


def format_model_config(cfg: ModelConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


def parse_model_config(text: str) -> ModelConfig:
    """Parse the flat ``key = value`` format; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = val
    cfg = ModelConfig()
    try:
        kw = {}
        for key, val in values.items():
            if key in ("stem_stride", "ca_blocks_on_p2", "num_classes"):
                kw[key] = int(val)
            elif key == "width_multiple":
                kw[key] = float(val)
            elif key == "stage_channels":
                kw[key] = tuple(int(x) for x in val.split(","))
            elif key == "enable_p2_head":
                if val.lower() not in ("true", "false"):
                    raise ConfigError(f"enable_p2_head must be true or false, got '{val}'")
                kw[key] = val.lower() == "true"
            elif key == "active_heads":
                kw[key] = tuple(x.strip() for x in val.split(",") if x.strip())
            else:
                kw[key] = val
        cfg = replace(cfg, **kw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"bad config value: {e}") from e
    return cfg.validate()


class Head(Module):
    """3x3 reduce conv + 1x1 projection to (tx, ty, tw, th, obj, cls...)."""

    def __init__(self, rng, cin, num_classes):
        mid = max(16, cin // 4)
        self.stem = ConvBNAct(rng, cin, mid, k=3)
        nout = 5 + num_classes
        # Small projection weights keep early box/objectness logits near the
        # bias values instead of the feature noise.
        self.pred_w = Tensor(
            (rng.standard_normal((nout, mid, 1, 1)) * 0.01).astype(np.float32),
            requires_grad=True,
        )
        bias = np.zeros(nout, dtype=np.float32)
        bias[4] = float(np.log(OBJ_PRIOR / (1.0 - OBJ_PRIOR)))
        self.pred_b = Tensor(bias, requires_grad=True)
        self.cin = cin
        self.mid = mid
        self.nout = nout

    def forward(self, x, training):
        return ag.conv2d(self.stem.forward(x, training), self.pred_w, self.pred_b)


@dataclass
class Record:
    """One evaluation step of the graph."""

    name: str
    kind: str  # conv|csp|sppf|ca|head|upsample|concat
    inputs: tuple
    module: object = None
    head: str = ""  # set for kind == 'head'


def _assemble(cfg: ModelConfig):
    """Candidate record list (structure only, no weights) for a config."""
    c0, c1, c2, c3, c4 = cfg.channels()
    nc = cfg.num_classes
    recs = []

    def conv(name, inp, cin, cout, k=3, stride=1):
        recs.append(Record(name, "conv", (inp,), ("conv", cin, cout, k, stride)))

    def csp(name, inp, cin, cout):
        recs.append(Record(name, "csp", (inp,), ("csp", cin, cout)))

    conv("backbone.stem", "input", 1, c0, 3, cfg.stem_stride)
    conv("backbone.down1", "backbone.stem", c0, c1, 3, 2)
    csp("backbone.stage1", "backbone.down1", c1, c1)
    conv("backbone.down2", "backbone.stage1", c1, c2, 3, 2)
    csp("backbone.stage2", "backbone.down2", c2, c2)
    conv("backbone.down3", "backbone.stage2", c2, c3, 3, 2)
    csp("backbone.stage3", "backbone.down3", c3, c3)
    conv("backbone.down4", "backbone.stage3", c3, c4, 3, 2)
    csp("backbone.stage4", "backbone.down4", c4, c4)
    recs.append(Record("backbone.sppf", "sppf", ("backbone.stage4",), ("sppf", c4)))

    recs.append(Record("neck.up5", "upsample", ("backbone.sppf",)))
    recs.append(Record("neck.cat54", "concat", ("neck.up5", "backbone.stage3")))
    csp("neck.t4", "neck.cat54", c4 + c3, c3)
    recs.append(Record("neck.up4", "upsample", ("neck.t4",)))
    recs.append(Record("neck.cat43", "concat", ("neck.up4", "backbone.stage2")))
    csp("neck.t3", "neck.cat43", c3 + c2, c2)

    p2_feat = None
    if cfg.enable_p2_head:
        recs.append(Record("neck.up3", "upsample", ("neck.t3",)))
        recs.append(Record("neck.cat32", "concat", ("neck.up3", "backbone.stage1")))
        csp("neck.t2", "neck.cat32", c2 + c1, c1)
        p2_feat = "neck.t2"
        for i in range(cfg.ca_blocks_on_p2):
            recs.append(Record(f"p2_attn.ca{i}", "ca", (p2_feat,), ("ca", c1)))
            p2_feat = f"p2_attn.ca{i}"

    # Bottom-up path.  With the P2 branch the path starts from T2 (taken
    # before attention); otherwise it starts from T3 as usual.
    p3_feat = "neck.t3"
    if cfg.enable_p2_head and cfg.pan_mode != "identity":
        conv("pan.down2", "neck.t2", c1, c1, 3, 2)
        recs.append(Record("pan.cat23", "concat", ("pan.down2", "neck.t3")))
        csp("pan.n3", "pan.cat23", c1 + c2, c2)
        p3_feat = "pan.n3"
    if cfg.pan_mode == "full":
        conv("pan.down3", p3_feat, c2, c2, 3, 2)
        recs.append(Record("pan.cat34", "concat", ("pan.down3", "neck.t4")))
        conv("pan.n4", "pan.cat34", c2 + c3, c3, 1, 1)
        conv("pan.down4", "pan.n4", c3, c3, 3, 2)
        recs.append(Record("pan.cat45", "concat", ("pan.down4", "backbone.sppf")))
        conv("pan.n5", "pan.cat45", c3 + c4, c4, 1, 1)

    head_feat = {"P2": p2_feat, "P3": p3_feat, "P4": "pan.n4", "P5": "pan.n5"}
    head_cin = {"P2": c1, "P3": c2, "P4": c3, "P5": c4}
    for h in HEAD_ORDER:
        if h in cfg.active_heads:
            recs.append(
                Record(f"head.{h.lower()}", "head", (head_feat[h],), ("head", head_cin[h], nc), head=h)
            )
    return recs


def _closure(records, roots):
    by_name = {r.name: r for r in records}
    keep = set()
    stack = list(roots)
    while stack:
        name = stack.pop()
        if name == "input" or name in keep:
            continue
        keep.add(name)
        stack.extend(by_name[name].inputs)
    return [r for r in records if r.name in keep]


def _record_rng(seed, name):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _build_module(rec: Record, rng):
    kind, args = rec.module[0], rec.module[1:]
    if kind == "conv":
        cin, cout, k, stride = args
        return ConvBNAct(rng, cin, cout, k=k, stride=stride)
    if kind == "csp":
        cin, cout = args
        return CSPBlock(rng, cin, cout, n=1)
    if kind == "sppf":
        return SPPF(rng, args[0])
    if kind == "ca":
        return CoordAttention(rng, args[0])
    if kind == "head":
        cin, nc = args
        return Head(rng, cin, nc)
    raise InvalidArgumentError(f"unknown record kind '{kind}'")


class ModelGraph:
    """An ordered record list with trained parameters."""

    def __init__(self, config: ModelConfig, records, seed):
        self.config = config
        self.records = records
        self.seed = seed
        self._by_name = {r.name: r for r in records}

    # -- parameters -----------------------------------------------------
    def named_params(self):
        for rec in self.records:
            if isinstance(rec.module, Module):
                yield from rec.module.named_params(rec.name)

    def named_buffers(self):
        for rec in self.records:
            if isinstance(rec.module, Module):
                yield from rec.module.named_buffers(rec.name)

    def params(self):
        return [t for _, t in self.named_params()]

    def zero_grads(self):
        for t in self.params():
            t.grad = None

    def head_strides(self):
        return self.config.head_strides()

    # -- execution -------------------------------------------------------
    def forward(self, images, training=False):
        """Run the graph; returns {head: Tensor[N, 5+nc, Hs, Ws]}."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise InvalidArgumentError(
                f"expected grayscale NCHW input, got shape {x.data.shape}"
            )
        div = 16 * self.config.stem_stride
        n, _, h, w = x.data.shape
        if h % div or w % div:
            raise InvalidArgumentError(
                f"input {h}x{w} not divisible by {div} (stem stride {self.config.stem_stride})"
            )
        cache = {"input": x}
        outputs = {}
        for rec in self.records:
            ins = [cache[name] for name in rec.inputs]
            if rec.kind == "upsample":
                out = ag.upsample_nearest2x(ins[0])
            elif rec.kind == "concat":
                out = ag.concat_channels(ins)
            else:
                out = rec.module.forward(ins[0], training)
            cache[rec.name] = out
            if rec.kind == "head":
                outputs[rec.head] = out
        return outputs

    def forward_traced(self, images, training=False):
        """Like forward but also returns every intermediate by record name."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        cache = {"input": x}
        outputs = {}
        for rec in self.records:
            ins = [cache[name] for name in rec.inputs]
            if rec.kind == "upsample":
                out = ag.upsample_nearest2x(ins[0])
            elif rec.kind == "concat":
                out = ag.concat_channels(ins)
            else:
                out = rec.module.forward(ins[0], training)
            cache[rec.name] = out
            if rec.kind == "head":
                outputs[rec.head] = out
        return outputs, cache


def build_model(config: ModelConfig, seed: int = 0) -> ModelGraph:
    """Assemble and initialize a model.

    Each record draws its weights from an RNG keyed on (seed, record name),
    so two models built from the same seed initialize shared records
    identically regardless of which other records exist.
    """
    config.validate()
    candidates = _assemble(config)
    roots = [f"head.{h.lower()}" for h in config.active_heads]
    records = _closure(candidates, roots)
    for rec in records:
        if rec.module is not None:
            rec.module = _build_module(rec, _record_rng(seed, rec.name))
    return ModelGraph(config, records, seed)


def count_params(model: ModelGraph):
    """Total trainable scalars plus a per-record breakdown."""
    rows = []
    total = 0
    for rec in model.records:
        n = rec.module.param_count() if isinstance(rec.module, Module) else 0
        rows.append((rec.name, rec.kind, n))
        total += n
    return total, rows


def _conv_flops(cin, cout, k, n, oh, ow, bias=False):
    f = 2 * cin * cout * k * k * oh * ow * n
    if bias:
        f += cout * oh * ow * n
    return f


def _conv_bn_act_flops(mod: ConvBNAct, n, h, w):
    oh = (h + 2 * (mod.k // 2) - mod.k) // mod.stride + 1
    ow = (w + 2 * (mod.k // 2) - mod.k) // mod.stride + 1
    f = _conv_flops(mod.cin, mod.cout, mod.k, n, oh, ow)
    f += 4 * n * mod.cout * oh * ow  # BN (2/element) + activation (2/element)
    return f, (n, mod.cout, oh, ow)


def _record_flops(rec: Record, in_shapes):
    """FLOPs and output shape for one record.

    Conventions: a k x k conv costs 2*Cin*Cout*k^2 per output position
    (+1 per position with bias), BN and activations cost 2 per element,
    elementwise add/mul cost 1 per element, max pooling costs k^2 per output
    element, directional mean pooling costs one add per input element plus
    one divide per output element, and upsample/concat are free.
    """
    kind = rec.kind
    if kind == "upsample":
        n, c, h, w = in_shapes[0]
        return 0, (n, c, 2 * h, 2 * w)
    if kind == "concat":
        n, _, h, w = in_shapes[0]
        c = sum(s[1] for s in in_shapes)
        return 0, (n, c, h, w)
    mod = rec.module
    if kind == "conv":
        n, _, h, w = in_shapes[0]
        return _conv_bn_act_flops(mod, n, h, w)
    if kind == "csp":
        n, _, h, w = in_shapes[0]
        f1, sa = _conv_bn_act_flops(mod.cv1, n, h, w)
        total = f1
        for blk in mod.blocks:
            fa, _ = _conv_bn_act_flops(blk.cv1, n, sa[2], sa[3])
            fb, _ = _conv_bn_act_flops(blk.cv2, n, sa[2], sa[3])
            total += fa + fb + int(np.prod(sa))  # residual add
        f2, _ = _conv_bn_act_flops(mod.cv2, n, h, w)
        total += f2
        f3, out = _conv_bn_act_flops(mod.cv3, n, sa[2], sa[3])
        return total + f3, out
    if kind == "sppf":
        n, _, h, w = in_shapes[0]
        f1, s1 = _conv_bn_act_flops(mod.cv1, n, h, w)
        pool = 3 * (mod.pool_k**2) * int(np.prod(s1))
        f2, out = _conv_bn_act_flops(mod.cv2, n, s1[2], s1[3])
        return f1 + pool + f2, out
    if kind == "ca":
        n, c, h, w = in_shapes[0]
        f = 2 * n * c * h * w  # two directional mean pools over the full map
        f += n * c * (h + w)  # divides producing the profiles
        fr, _ = _conv_bn_act_flops(mod.reduce, n, h + w, 1)
        f += fr
        f += _conv_flops(mod.cr, c, 1, n, h, 1, bias=True)
        f += _conv_flops(mod.cr, c, 1, n, 1, w, bias=True)
        f += 2 * n * c * (h + w)  # sigmoid on both gates
        f += 2 * n * c * h * w  # two broadcast multiplies
        return f, (n, c, h, w)
    if kind == "head":
        n, _, h, w = in_shapes[0]
        f1, s1 = _conv_bn_act_flops(mod.stem, n, h, w)
        f2 = _conv_flops(mod.mid, mod.nout, 1, n, s1[2], s1[3], bias=True)
        return f1 + f2, (n, mod.nout, s1[2], s1[3])
    raise InvalidArgumentError(f"unknown record kind '{kind}'")


def count_flops(model: ModelGraph, input_hw):
    """Forward FLOPs for a batch-1 grayscale input of the given (H, W).

    Returns (total, rows) where rows are (record name, kind, flops,
    output shape).  Uses shape propagation only; no tensors are evaluated.
    """
    h, w = input_hw
    div = 16 * model.config.stem_stride
    if h % div or w % div:
        raise InvalidArgumentError(f"input {h}x{w} not divisible by {div}")
    shapes = {"input": (1, 1, h, w)}
    rows = []
    total = 0
    for rec in model.records:
        in_shapes = [shapes[name] for name in rec.inputs]
        f, out = _record_flops(rec, in_shapes)
        shapes[rec.name] = out
        rows.append((rec.name, rec.kind, int(f), out))
        total += int(f)
    return total, rows


def trim(model: ModelGraph, keep_heads, pan_mode: str) -> ModelGraph:
    """Shrink a model to ``keep_heads``, dropping unreachable records.

    The surviving records keep their trained parameters (copied, so the new
    model shares nothing with the old).  The requested ``pan_mode`` must
    describe the dependency closure of the kept heads; combinations that
    would need records the source model lacks, or leave records the target
    structure cannot express, are rejected.
    """
    keep = tuple(h for h in HEAD_ORDER if h in keep_heads)
    if len(keep) != len(set(keep_heads)):
        raise ConfigError(f"unknown or duplicate heads in {keep_heads!r}")
    missing = set(keep) - set(model.config.active_heads)
    if missing:
        raise ConfigError(f"model has no heads {sorted(missing)} to keep")
    new_cfg = replace(
        model.config,
        active_heads=keep,
        pan_mode=pan_mode,
        enable_p2_head="P2" in keep,
    )
    new_cfg.validate()

    structure = _closure(_assemble(new_cfg), [f"head.{h.lower()}" for h in keep])
    closure = {r.name: r for r in _closure(model.records, [f"head.{h.lower()}" for h in keep])}
    want = {r.name for r in structure}
    have = set(closure)
    if want != have:
        raise ConfigError(
            f"trim to heads={keep} pan_mode='{pan_mode}' does not match the "
            f"reachable subgraph (missing {sorted(want - have)}, stranded {sorted(have - want)})"
        )

    new_records = []
    for spec_rec in structure:
        old = closure[spec_rec.name]
        if old.inputs != spec_rec.inputs or old.kind != spec_rec.kind:
            raise ConfigError(f"record '{spec_rec.name}' is wired differently in the target structure")
        new_records.append(Record(spec_rec.name, old.kind, old.inputs, old.module, old.head))
    trimmed = ModelGraph(new_cfg, new_records, model.seed)
    return _copy_graph_params(trimmed)


def _copy_graph_params(model: ModelGraph) -> ModelGraph:
    """Deep-copy all modules so the graph owns its parameters."""
    fresh = []
    for rec in model.records:
        if rec.module is None:
            fresh.append(rec)
            continue
        clone = _build_module(
            Record(rec.name, rec.kind, rec.inputs, _module_spec(rec), rec.head),
            np.random.default_rng(0),
        )
        src_p = dict(rec.module.named_params())
        for name, t in clone.named_params():
            t.data = src_p[name].data.copy()
            t.requires_grad = src_p[name].requires_grad
        src_b = dict(rec.module.named_buffers())
        for name, buf in clone.named_buffers():
            buf[:] = src_b[name]
        fresh.append(Record(rec.name, rec.kind, rec.inputs, clone, rec.head))
    return ModelGraph(model.config, fresh, model.seed)


def _module_spec(rec: Record):
    """Reconstruct the constructor spec tuple from a built module."""
    m = rec.module
    if rec.kind == "conv":
        return ("conv", m.cin, m.cout, m.k, m.stride)
    if rec.kind == "csp":
        return ("csp", m.cin, m.cout)
    if rec.kind == "sppf":
        return ("sppf", m.cin)
    if rec.kind == "ca":
        return ("ca", m.c)
    if rec.kind == "head":
        return ("head", m.cin, m.nout - 5)
    raise InvalidArgumentError(f"record '{rec.name}' has no module spec")
