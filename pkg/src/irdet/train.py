"""Training engine: AdamW, layer freezing, the epoch loop, checkpoints.

Determinism: all shuffling comes from one generator seeded by the training
seed, parameter updates are plain numpy arithmetic, and evaluation runs in
eval mode, so two runs from the same seed and data produce bitwise-identical
parameters and history.

Checkpoint format (binary, little-endian), magic ``TYRK`` version 1:

    magic  4 bytes  b"TYRK"
    version u32
    repeated records until EOF:
        name_len u32, name utf-8, rank u32, dims u32 * rank,
        payload float32 * prod(dims)

Model configuration is stored in numeric records under ``cfg/``, parameters
and BN running buffers under their graph names, and optimizer state under
``opt/``.  Loading rebuilds the graph from the config records and requires
an exact name match in both directions.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import backward
from .errors import CheckpointError, ConfigError, InvalidArgumentError, NanAbortError
from .metrics import evaluate
from .model import (
    HEAD_ORDER,
    ModelConfig,
    ModelGraph,
    PAN_MODES,
    Record,
    _build_module,
    _module_spec,
    _record_rng,
    build_model,
)
from .pipeline import LossConfig, assign_targets, decode, head_grid_map, nms, total_loss

FREEZE_SPECS = ("none", "backbone", "backbone_and_neck")
EVAL_CONF = 0.01  # decode threshold for validation metrics (AP needs weak dets)
EVAL_MAX_DET = 300


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0
    freeze_spec: str = "none"
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0  # 0: only the final checkpoint
    warmup_epochs: float = 0.0  # linear lr ramp over the first N (fractional) epochs
    lr_final_frac: float = 1.0  # cosine-decay floor as a fraction of lr; 1.0 = constant

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.lr > 0):
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.freeze_spec not in FREEZE_SPECS:
            raise ConfigError(f"freeze_spec must be one of {FREEZE_SPECS}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not (0.0 <= self.warmup_epochs <= self.epochs):
            raise ConfigError("warmup_epochs must be in [0, epochs]")
        if not (0.0 < self.lr_final_frac <= 1.0):
            raise ConfigError("lr_final_frac must be in (0, 1]")
        self.loss.validate()
        return self


class AdamW:
    """Adam with decoupled weight decay.

    theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=5e-4):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named_params}

    def zero_grad(self):
        for _, t in self.named_params:
            t.grad = None

    def step(self):
        self.step_count += 1
        b1t = 1.0 - self.beta1**self.step_count
        b2t = 1.0 - self.beta2**self.step_count
        for name, t in self.named_params:
            if not t.requires_grad or t.grad is None:
                continue
            g = t.grad.astype(np.float32, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / b1t
            v_hat = v / b2t
            t.data = t.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * t.data
            )


def lr_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Learning rate for 0-based global step: linear warmup, then cosine decay.

    Decays from cfg.lr to cfg.lr * lr_final_frac over the post-warmup steps;
    the default config (no warmup, frac 1.0) is a constant rate.
    """
    warm = int(round(cfg.warmup_epochs * steps_per_epoch))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.lr_final_frac >= 1.0:
        return cfg.lr
    span = max(cfg.epochs * steps_per_epoch - warm, 1)
    t = min((step - warm) / span, 1.0)
    lo = cfg.lr * cfg.lr_final_frac
    return lo + (cfg.lr - lo) * 0.5 * (1.0 + math.cos(math.pi * t))


def freeze(model: ModelGraph, spec: str):
    """Set requires_grad per the freeze spec; returns the frozen name list."""
    if spec not in FREEZE_SPECS:
        raise ConfigError(f"freeze_spec must be one of {FREEZE_SPECS}, got '{spec}'")
    prefixes = ()
    if spec == "backbone":
        prefixes = ("backbone.",)
    elif spec == "backbone_and_neck":
        prefixes = ("backbone.", "neck.")
    frozen = []
    for name, t in model.named_params():
        hit = name.startswith(prefixes) if prefixes else False
        t.requires_grad = not hit
        if hit:
            frozen.append(name)
    return frozen


def reinit_trainable(model: ModelGraph, seed: int):
    """Redraw every record whose parameters are all trainable.

    Used by two-stage training: after freezing the backbone and neck, the
    attention blocks and heads restart from a fresh init while the frozen
    trunk keeps its trained weights.
    """
    for rec in model.records:
        if rec.module is None:
            continue
        params = list(rec.module.named_params())
        if not params or not all(t.requires_grad for _, t in params):
            continue
        fresh = _build_module(
            Record(rec.name, rec.kind, rec.inputs, _module_spec(rec), rec.head),
            _record_rng(seed, rec.name),
        )
        fresh_p = dict(fresh.named_params())
        for name, t in params:
            t.data = fresh_p[name].data.copy()
        fresh_b = dict(fresh.named_buffers())
        for name, buf in rec.module.named_buffers():
            buf[:] = fresh_b[name]
    return model


def _locate_nan(model, images, assignments, loss_cfg, head_grids):
    """Re-run the forward with intermediates to name the first bad record."""
    outs, cache = model.forward_traced(images, training=True)
    for rec in model.records:
        if not np.all(np.isfinite(cache[rec.name].data)):
            return rec.name
    loss, _ = total_loss(outs, assignments, loss_cfg, head_grids)
    if not np.isfinite(loss.data.item()):
        return "loss"
    return "unknown"


def run_validation(model: ModelGraph, samples, conf_thresh=0.25):
    """Decode + NMS + metrics on a sample list (eval mode)."""
    per_dets = []
    per_gts = []
    grids = None
    for s in samples:
        h, w = s.image.shape[1:]
        if grids is None:
            grids = head_grid_map(model.head_strides(), (h, w))
        outs = model.forward(s.image[None, :, :, :], training=False)
        dets = decode(outs, EVAL_CONF, grids, max_det=EVAL_MAX_DET)[0]
        per_dets.append(nms(dets))
        per_gts.append(s.boxes)
    return evaluate(per_dets, per_gts, conf_thresh=conf_thresh), per_dets


def train(model: ModelGraph, train_samples, cfg: TrainConfig, val_samples=None, out_dir=None, log=None):
    """Train in place; returns the per-epoch history list.

    Each history entry has: epoch, loss_total, loss_box, loss_obj, loss_cls,
    precision, recall, f1, ap50 (metric fields are 0.0 without a val set).
    When ``out_dir`` is set, history.jsonl and checkpoints are written there.
    """
    cfg.validate()
    if not train_samples:
        raise InvalidArgumentError("train() needs at least one training sample")
    freeze(model, cfg.freeze_spec)
    optim = AdamW(
        [(n, t) for n, t in model.named_params() if t.requires_grad],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(cfg.seed)
    h, w = train_samples[0].image.shape[1:]
    grids = head_grid_map(model.head_strides(), (h, w))
    assignments = [assign_targets(s.boxes, grids) for s in train_samples]
    steps_per_epoch = -(-len(train_samples) // cfg.batch_size)
    gstep = 0

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        history_path = os.path.join(out_dir, "history.jsonl")
        open(history_path, "w").close()

    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_samples))
        sums = {"total": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images = np.stack([train_samples[i].image for i in idx])
            batch_asg = [assignments[i] for i in idx]
            outs = model.forward(images, training=True)
            loss, parts = total_loss(outs, batch_asg, cfg.loss, grids)
            if not np.isfinite(parts["total"]):
                bad = _locate_nan(model, images, batch_asg, cfg.loss, grids)
                raise NanAbortError(f"non-finite loss at epoch {epoch}; first bad record: {bad}")
            optim.zero_grad()
            backward(loss)
            optim.lr = lr_at(cfg, gstep, steps_per_epoch)
            optim.step()
            gstep += 1
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1

        entry = {
            "epoch": epoch,
            "loss_total": sums["total"] / n_batches,
            "loss_box": sums["box"] / n_batches,
            "loss_obj": sums["obj"] / n_batches,
            "loss_cls": sums["cls"] / n_batches,
            "precision": 0.0,
            "recall": 0.0,
            "f1": 0.0,
            "ap50": 0.0,
        }
        if val_samples:
            report, _ = run_validation(model, val_samples)
            entry.update(
                precision=report.precision, recall=report.recall, f1=report.f1, ap50=report.ap50
            )
        history.append(entry)
        if log:
            log(entry)
        if out_dir:
            with open(history_path, "a") as f:
                f.write(json.dumps(entry) + "\n")
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and epoch < cfg.epochs:
                save_checkpoint(os.path.join(out_dir, f"epoch_{epoch:04d}.ckpt"), model, optim)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model, optim)
    return history


# ---------------------------------------------------------------------------
# checkpoint serialization

MAGIC = b"TYRK"
VERSION = 1


def _write_record(f, name, arr):
    data = np.ascontiguousarray(arr, dtype=np.float32)
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        f.write(struct.pack("<I", d))
    f.write(data.tobytes())


def _config_records(cfg: ModelConfig):
    head_flags = np.array([1.0 if h in cfg.active_heads else 0.0 for h in HEAD_ORDER])
    return [
        ("cfg/stem_stride", np.array([cfg.stem_stride])),
        ("cfg/width_multiple", np.array([cfg.width_multiple])),
        ("cfg/stage_channels", np.array(cfg.stage_channels, dtype=np.float32)),
        ("cfg/enable_p2_head", np.array([1.0 if cfg.enable_p2_head else 0.0])),
        ("cfg/ca_blocks_on_p2", np.array([cfg.ca_blocks_on_p2])),
        ("cfg/active_heads", head_flags),
        ("cfg/pan_mode", np.array([PAN_MODES.index(cfg.pan_mode)])),
        ("cfg/num_classes", np.array([cfg.num_classes])),
    ]


def _config_from_records(records):
    try:
        heads = tuple(h for h, flag in zip(HEAD_ORDER, records["cfg/active_heads"]) if flag > 0.5)
        return ModelConfig(
            stem_stride=int(records["cfg/stem_stride"][0]),
            width_multiple=float(records["cfg/width_multiple"][0]),
            stage_channels=tuple(int(c) for c in records["cfg/stage_channels"]),
            enable_p2_head=bool(records["cfg/enable_p2_head"][0] > 0.5),
            ca_blocks_on_p2=int(records["cfg/ca_blocks_on_p2"][0]),
            active_heads=heads,
            pan_mode=PAN_MODES[int(records["cfg/pan_mode"][0])],
            num_classes=int(records["cfg/num_classes"][0]),
        ).validate()
    except (KeyError, IndexError) as e:
        raise CheckpointError(f"checkpoint missing config record: {e}") from e


def save_checkpoint(path, model: ModelGraph, optim: AdamW | None = None):
    """Write config, parameters, BN buffers, and optional optimizer state."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in _config_records(model.config):
            _write_record(f, name, arr)
        for name, t in model.named_params():
            _write_record(f, name, t.data)
        for name, buf in model.named_buffers():
            _write_record(f, name, buf)
        if optim is not None:
            _write_record(f, "opt/step", np.array([optim.step_count]))
            _write_record(
                f,
                "opt/hyper",
                np.array([optim.lr, optim.beta1, optim.beta2, optim.eps, optim.weight_decay]),
            )
            for name, _ in optim.named_params:
                _write_record(f, f"opt/m/{name}", optim.m[name])
                _write_record(f, f"opt/v/{name}", optim.v[name])


def _read_records(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    records = {}
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"{path}: truncated or corrupt at byte {pos}: {e}") from e
        if name in records:
            raise CheckpointError(f"{path}: duplicate record '{name}'")
        records[name] = arr.copy()
    return records


def load_checkpoint(path):
    """Rebuild (model, optim_state dict or None) from a checkpoint.

    Every parameter and buffer of the rebuilt graph must be present in the
    file and vice versa; mismatches name the offending records.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    records = _read_records(path)
    cfg = _config_from_records(records)
    model = build_model(cfg, seed=0)

    expected = {name: t for name, t in model.named_params()}
    buffers = dict(model.named_buffers())
    file_names = {n for n in records if not n.startswith(("cfg/", "opt/"))}
    want = set(expected) | set(buffers)
    missing = sorted(want - file_names)
    if missing:
        raise CheckpointError(f"{path}: missing parameter records: {missing}")
    unexpected = sorted(file_names - want)
    if unexpected:
        raise CheckpointError(f"{path}: unexpected records: {unexpected}")
    for name, t in expected.items():
        arr = records[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: record '{name}' has shape {arr.shape}, model expects {t.data.shape}"
            )
        t.data = arr.astype(np.float32)
    for name, buf in buffers.items():
        buf[:] = records[name]

    optim_state = None
    if "opt/step" in records:
        optim_state = {
            "step": int(records["opt/step"][0]),
            "hyper": records["opt/hyper"].copy(),
            "m": {n[len("opt/m/") :]: a for n, a in records.items() if n.startswith("opt/m/")},
            "v": {n[len("opt/v/") :]: a for n, a in records.items() if n.startswith("opt/v/")},
        }
    return model, optim_state


def restore_optimizer(optim: AdamW, state):
    """Load a state dict produced by load_checkpoint into an AdamW."""
    optim.step_count = state["step"]
    lr, b1, b2, eps, wd = (float(x) for x in state["hyper"])
    optim.lr, optim.beta1, optim.beta2, optim.eps, optim.weight_decay = lr, b1, b2, eps, wd
    for name, _ in optim.named_params:
        if name not in state["m"]:
            raise CheckpointError(f"optimizer state missing moments for '{name}'")
        optim.m[name] = state["m"][name].astype(np.float32).copy()
        optim.v[name] = state["v"][name].astype(np.float32).copy()
