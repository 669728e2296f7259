"""Supervised training: cross-entropy, AdamW, multi-step learning rate."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import SiformerConfig, SiformerParams, forward, init_params
from .rectify import RectifyConfig, rectify_sequence
from .sampling import AugmentConfig, SmoteConfig, augment, augment_rng, normalize_parts, smote_balance
from .skeleton import LabeledDataset, pad_to_max_frames
from .tensor import (
    Tensor, backward, concat_rows, cross_entropy, linear, mean_rows, no_grad, slice_rows, zero_grad,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "AdamState", "adamw_step", "lr_schedule", "cross_entropy", "preprocess",
    "train", "accuracy", "attach_exit_classifiers", "EXIT_SITES",
]

EXIT_SITES = ("encoder", "decoder")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-8
    milestones: tuple[int, ...] = (60, 80)
    gamma: float = 0.1
    adam_eps: float = 1e-8
    seed: int = 0
    batch_size: int = 1
    rectify: bool = True
    augment: bool = False
    smote: bool = False
    train_classifiers: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0 or self.gamma <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("lr0, gamma and adam_eps must be positive; weight_decay >= 0")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be two values in [0, 1)")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if ms and (ms[0] < 0 or ms[-1] > self.epochs):
            raise ValueError(f"milestones must lie in [0, {self.epochs}]")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["milestones"] = list(self.betas), list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.gamma ** sum(1 for m in cfg.milestones if m <= epoch)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
               cfg: TrainConfig, lr: float | None = None) -> AdamState:
    """In-place AdamW update: decoupled decay first, then bias-corrected Adam."""
    lr = cfg.lr0 if lr is None else lr
    b1, b2 = cfg.betas
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


def preprocess(ds: LabeledDataset, cfg: TrainConfig, rectify_cfg: RectifyConfig = RectifyConfig(),
               smote_cfg: SmoteConfig | None = None) -> LabeledDataset:
    """Optional rectification, part-wise normalisation, then optional SMOTE.

    Pass ``smote_cfg=None`` (the default) for evaluation data.
    """
    if cfg.rectify:
        ds = ds.map(lambda s: rectify_sequence(s, rectify_cfg))
    ds = ds.map(normalize_parts)
    if cfg.smote and smote_cfg is not None:
        ds = smote_balance(pad_to_max_frames(ds), smote_cfg)
    return ds


# ---------------------------------------------------------------- internal classifiers


def attach_exit_classifiers(params: SiformerParams, seed: int = 0) -> SiformerParams:
    """Add one trainable d->C linear head per encoder and decoder layer."""
    cfg = params.config
    rng = np.random.default_rng([seed, 7])
    bound = 1.0 / np.sqrt(cfg.d_model)
    depth = {"encoder": cfg.encoder_layers, "decoder": cfg.decoder_layers}
    for site in EXIT_SITES:
        for i in range(1, depth[site] + 1):
            for suffix, shape in (("W", (cfg.d_model, cfg.num_classes)), ("b", (1, cfg.num_classes))):
                name = f"exit.{site}.{i}.{suffix}"
                params.tensors[name] = Tensor(rng.uniform(-bound, bound, shape),
                                              requires_grad=True, name=name)
    return params


def _pooled(states: list[Tensor], masks: list[np.ndarray]) -> Tensor:
    rows = [slice_rows(s, 0, int(m.sum())) for s, m in zip(states, masks)]
    return mean_rows(concat_rows(rows))


def _aux_losses(trace, params: SiformerParams, label: int) -> list[Tensor]:
    cfg = params.config
    out = []
    for i in range(1, cfg.encoder_layers + 1):
        h = _pooled([trace.encoder_states[s][i] for s in cfg.streams],
                    [trace.encoder_masks[s][i] for s in cfg.streams])
        out.append(cross_entropy(linear(h, params[f"exit.encoder.{i}.W"],
                                        params[f"exit.encoder.{i}.b"]), label))
    for i in range(1, cfg.decoder_layers + 1):
        out.append(cross_entropy(linear(trace.decoder_states[i], params[f"exit.decoder.{i}.W"],
                                        params[f"exit.decoder.{i}.b"]), label))
    return out


# ---------------------------------------------------------------- loop


def accuracy(ds: LabeledDataset, params: SiformerParams) -> float:
    if len(ds) == 0:
        raise ValueError("accuracy of an empty dataset")
    with no_grad():
        hits = sum(forward(s, params).label == s.label for s in ds)
    return hits / len(ds)


def train(ds: LabeledDataset, model_cfg: SiformerConfig, cfg: TrainConfig,
          rectify_cfg: RectifyConfig = RectifyConfig(),
          augment_cfg: AugmentConfig = AugmentConfig(),
          smote_cfg: SmoteConfig = SmoteConfig(),
          validation: LabeledDataset | None = None,
          params: SiformerParams | None = None,
          on_epoch=None):
    """Train from scratch (or continue ``params``). Returns ``(params, history)``.

    ``history`` has one record per epoch: loss (mean over samples),
    accuracy (running, on the augmented training stream), lr and, when
    ``validation`` is given, val_accuracy. ``validation`` must already be
    preprocessed. ``on_epoch(record, params)`` runs after every epoch and
    stops training early by returning True.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if ds.num_classes != model_cfg.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, model expects {model_cfg.num_classes}")
    data = preprocess(ds, cfg, rectify_cfg, smote_cfg)
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    if cfg.train_classifiers and "exit.encoder.1.W" not in params.tensors:
        attach_exit_classifiers(params, cfg.seed)
    trainable = {k: t for k, t in params.tensors.items() if t.requires_grad}
    state = AdamState()
    order_rng = np.random.default_rng(cfg.seed)
    history, steps = [], 0
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = order_rng.permutation(len(data))
        total, hits, seen = 0.0, 0, 0
        zero_grad(trainable)
        for pos, idx in enumerate(order):
            seq = data[int(idx)]
            if cfg.augment:
                seq = augment(seq, augment_cfg, augment_rng(augment_cfg.seed + cfg.seed, int(idx), epoch))
            trace = forward(seq, params)
            loss = cross_entropy(trace.logits, seq.label)
            if cfg.train_classifiers:
                for aux in _aux_losses(trace, params, seq.label):
                    loss = loss + aux
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, sample {int(idx)}")
            backward(loss)
            total += value
            hits += trace.label == seq.label
            seen += 1
            if seen % cfg.batch_size == 0 or pos == len(order) - 1:
                n = cfg.batch_size if seen % cfg.batch_size == 0 else seen % cfg.batch_size
                grads = {k: t.grad / n for k, t in trainable.items() if t.grad is not None}
                adamw_step(trainable, grads, state, cfg, lr)
                zero_grad(trainable)
                steps += 1
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
        rec = {"epoch": epoch, "loss": total / seen, "accuracy": hits / seen, "lr": lr}
        if validation is not None:
            rec["val_accuracy"] = accuracy(validation, params)
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f lr %.1e", epoch, rec["loss"], rec["accuracy"], lr)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        if on_epoch is not None and on_epoch(rec, params):
            break
    return params, history
