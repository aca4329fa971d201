"""Training loop, AdamW, learning-rate schedule, checkpoints and evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .config import load_config
from .data.augment import AugmentConfig, augment
from .data.phantom import load_manifest_cases, sample_seed
from .losses import dice_loss, one_hot, segmentation_loss
from .metrics import case_metrics, write_report
from .model import ModelConfig, build_model, model_forward

LOSS_COLUMNS = ("epoch", "lr", "total", "ce", "dice", "alpha", "train_soft_dice", "val_soft_dice")
CHECKPOINT_MAGIC = b"UKEP"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 50
    batch_size: int = 2
    weight_decay: float = 1e-4
    lr_start: float = 0.005
    lr_peak: float = 0.01
    warmup_epochs: int = 30
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss_mode: str = "dynamic"
    ce_reduction: str = "mean"
    checkpoint_every: int = 10
    manifest: str = ""
    val_manifest: str = ""
    output_dir: str = "run"
    augment: bool = False
    crop: tuple | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.crop is not None:
            self.crop = tuple(int(c) for c in self.crop)

    def validate(self):
        self.model.validate()
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} and {self.epochs}")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be positive")
        if min(self.lr_start, self.lr_peak, self.eps) <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates and eps must be positive, weight decay non-negative")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.loss_mode not in ("dynamic", "fixed_half"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.ce_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown ce_reduction {self.ce_reduction!r}")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        d["crop"] = list(self.crop) if self.crop is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys {sorted(unknown)}")
        return cls(model=model, **d)

    @classmethod
    def from_sections(cls, sections):
        """Build from a parsed config file: ``model.*``, ``train.*`` and ``data.*`` keys."""
        d = dict(sections.get("train", {}))
        data = dict(sections.get("data", {}))
        for key in ("manifest", "val_manifest", "augment", "crop"):
            if key in data:
                d[key] = data.pop(key)
        if data:
            raise ValueError(f"unknown data keys {sorted(data)}")
        d["model"] = dict(sections.get("model", {}))
        return cls.from_dict(d)


def config_from_file(path, seed=None):
    cfg = TrainConfig.from_sections(load_config(path))
    base = os.path.dirname(os.path.abspath(path))
    for key in ("manifest", "val_manifest", "output_dir"):
        value = getattr(cfg, key)
        if value and not os.path.isabs(value):
            setattr(cfg, key, os.path.join(base, value))
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


def lr_schedule(epoch, cfg: TrainConfig):
    """Linear warmup ``lr_start -> lr_peak``, then cosine decay to zero at ``cfg.epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / w
    if epoch == cfg.epochs:
        return 0.0
    return cfg.lr_peak * (1 + math.cos(math.pi * (epoch - w) / (cfg.epochs - w))) / 2


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params):
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def adamw_step(params, grads, state: AdamState, lr, cfg: TrainConfig):
    """One in-place AdamW update; ``params`` maps names to tensors, ``grads`` is keyed by tensor."""
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name in sorted(params):
        p = params[name]
        if p not in grads:
            raise TrainingError(f"no gradient for parameter {name!r}; the graph does not reach it")
        g = grads[p]
        dt = p.data.dtype.type
        p.data *= dt(1 - lr * cfg.weight_decay)
        m, v = state.m[name], state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
    return state


# ---- checkpoints -----------------------------------------------------------


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(path, cfg: TrainConfig, params, state: AdamState, epoch, history):
    """Write magic, version, config JSON, meta JSON, then the named tensors."""
    meta = {"epoch": epoch, "step": state.step, "seed": cfg.seed, "history": history}
    tensors = []
    for name in sorted(params):
        tensors.append((f"param/{name}", params[name].data))
        tensors.append((f"adam_m/{name}", state.m[name]))
        tensors.append((f"adam_v/{name}", state.v[name]))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(_pack_str(json.dumps(cfg.to_dict(), sort_keys=True)))
    buf.write(_pack_str(json.dumps(meta, sort_keys=True)))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        buf.write(_pack_str(name))
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(cfg, meta, tensors)`` with tensors as a name -> ndarray dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TrainingError(f"checkpoint {path} is truncated")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    if take(4) != CHECKPOINT_MAGIC:
        raise TrainingError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"unsupported checkpoint version {version}")
    cfg = TrainConfig.from_dict(json.loads(take_str()))
    meta = json.loads(take_str())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        name = take_str()
        code, rank = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(n), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return cfg, meta, tensors


def restore_model(cfg: TrainConfig, tensors):
    graph = build_model(cfg.model)
    params = dict(graph.named_parameters())
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors or tensors[key].shape != p.shape:
            raise TrainingError(f"checkpoint lacks a matching tensor for {name!r}")
        p.data = tensors[key].copy()
    return graph


# ---- training ----------------------------------------------------------------


def _format_row(row):
    return [str(row[0])] + [format(float(v), ".17g") for v in row[1:]]


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow(_format_row(row))


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batch_arrays(samples, dtype):
    image = np.stack([s.image for s in samples]).astype(dtype)
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return image, labels


def soft_dice(graph, cases, batch_size, dtype):
    """``1 - mean per-sample Dice loss`` on softmax outputs, no gradient."""
    if not cases:
        return float("nan")
    losses = []
    with T.no_grad():
        for i in range(0, len(cases), batch_size):
            image, labels = _batch_arrays(cases[i : i + batch_size], dtype)
            logits = model_forward(graph, image)
            probs = T.softmax(logits, axis=1)
            dl = dice_loss(probs, one_hot(labels, logits.shape[1], dtype=probs.dtype))
            losses.extend(dl.data.astype(np.float64))
    return 1.0 - float(np.mean(losses))


def train(cfg: TrainConfig, resume=None, log=print, cases=None, val_cases=None):
    """Run (or resume) training; returns ``(graph, history)``.

    Data order and augmentation draws are pure functions of ``(seed, epoch)``,
    so a resumed run replays the remaining epochs exactly.
    """
    cfg.validate()
    dtype = np.dtype(cfg.model.dtype)
    if cases is None:
        if not cfg.manifest:
            raise TrainingError("no training manifest configured (data.manifest)")
        cases = load_manifest_cases(cfg.manifest)
    if val_cases is None:
        val_cases = load_manifest_cases(cfg.val_manifest) if cfg.val_manifest else []
    if not cases:
        raise TrainingError("training manifest lists no cases")
    os.makedirs(cfg.output_dir, exist_ok=True)

    if resume is not None:
        saved_cfg, meta, tensors = load_checkpoint(resume)
        if saved_cfg.model != cfg.model:
            raise TrainingError("checkpoint model configuration differs from the requested one")
        graph = restore_model(saved_cfg, tensors)
        params = dict(graph.named_parameters())
        state = AdamState(meta["step"], {k: tensors[f"adam_m/{k}"].copy() for k in params}, {k: tensors[f"adam_v/{k}"].copy() for k in params})
        start = meta["epoch"]
        history = [tuple(r) for r in meta["history"]][:start]
    else:
        graph = build_model(cfg.model)
        params = dict(graph.named_parameters())
        state = AdamState.zeros_like(params)
        start = 0
        history = []

    aug_cfg = AugmentConfig(crop=cfg.crop, seed=cfg.seed)
    csv_path = os.path.join(cfg.output_dir, "loss.csv")
    for epoch in range(start, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = epoch_order(cfg.seed, epoch, len(cases))
        sums = np.zeros(4)
        n_samples = 0
        for b in range(0, len(order), cfg.batch_size):
            batch = [cases[i] for i in order[b : b + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, aug_cfg, sample_seed(cfg.seed, s.case_id, epoch)) for s in batch]
            image, labels = _batch_arrays(batch, dtype)
            logits = model_forward(graph, image)
            total, parts = segmentation_loss(logits, labels, cfg.loss_mode, cfg.ce_reduction)
            if not np.isfinite(parts.total) or not np.all(np.isfinite(parts.ce)) or not np.all(np.isfinite(parts.dice)):
                ids = [s.case_id for s in batch]
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b // cfg.batch_size} (cases {ids})")
            grads = T.backward(total)
            adamw_step(params, grads, state, lr, cfg)
            k = len(batch)
            sums += [parts.total * k, parts.ce.sum(), parts.dice.sum(), parts.alpha.sum()]
            n_samples += k
        mean_total, mean_ce, mean_dice, mean_alpha = sums / n_samples
        val = soft_dice(graph, val_cases, cfg.batch_size, dtype)
        history.append((epoch + 1, lr, mean_total, mean_ce, mean_dice, mean_alpha, 1.0 - mean_dice, val))
        write_loss_csv(csv_path, history)
        log(f"epoch {epoch + 1}/{cfg.epochs} lr {lr:.5f} loss {mean_total:.4f} train soft dice {1 - mean_dice:.4f}")
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            save_checkpoint(os.path.join(cfg.output_dir, f"epoch_{done:04d}.ukep"), cfg, params, state, done, history)
            save_checkpoint(os.path.join(cfg.output_dir, "last.ukep"), cfg, params, state, done, history)
    return graph, history


def predict_labels(graph, sample):
    dtype = np.dtype(graph.config.dtype)
    with T.no_grad():
        logits = model_forward(graph, sample.image[None].astype(dtype))
    return np.argmax(logits.data[0], axis=0).astype(np.uint8)


def evaluate(checkpoint, manifest, out_csv, predictor=None):
    """Per-case and aggregate metrics CSV; ``predictor(sample)`` overrides the model."""
    if predictor is None:
        cfg, _, tensors = load_checkpoint(checkpoint)
        graph = restore_model(cfg, tensors)
        predictor = lambda s: predict_labels(graph, s)
    cases = {}
    for sample in load_manifest_cases(manifest):
        pred = predictor(sample)
        if pred.shape != sample.labels.shape:
            raise TrainingError(f"case {sample.case_id}: prediction {pred.shape} vs labels {sample.labels.shape}")
        cases[sample.case_id] = case_metrics(pred, sample.labels, sample.spacing)
    write_report(out_csv, cases)
    return cases
