"""Input-adaptive inference with patience-based early exit.

After each layer of the chosen site a linear internal classifier predicts a
label. When ``patience`` consecutive layers agree with their predecessor,
execution halts and that label is returned. Encoder-site exits never run
the decoder.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import (
    SiformerParams,
    classify,
    count_flops,
    decoder_layer,
    distill_step,
    embed,
    encoder_layer,
    fuse,
    stream_inputs,
)
from .skeleton import LAYOUT, LabeledDataset, remove_keypoints
from .tensor import no_grad, softmax_rows

SITES = ("encoder", "decoder")
CLASSIFIER_MODES = ("fresh", "trained")
OFF = "off"
_SITE_CODE = {"encoder": 1, "decoder": 2}


@dataclass(frozen=True)
class EarlyExitConfig:
    patience: int | str = 1
    site: str = "encoder"
    classifier_mode: str = "fresh"
    seed: int = 0

    def __post_init__(self):
        if self.patience != OFF and (not isinstance(self.patience, int)
                                     or isinstance(self.patience, bool) or self.patience < 1):
            raise ValueError(f"patience must be an integer >= 1 or {OFF!r}, got {self.patience!r}")
        if self.site not in SITES:
            raise ValueError(f"site must be one of {SITES}")
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ValueError(f"classifier_mode must be one of {CLASSIFIER_MODES}")

    @property
    def enabled(self) -> bool:
        return self.patience != OFF


@dataclass
class ExitTrace:
    predictions: list[int] = field(default_factory=list)
    counters: list[int] = field(default_factory=list)
    exit_layer: int = 0
    exited: bool = False
    flops: int = 0
    wall_time: float = 0.0
    label: int = -1

    def to_dict(self) -> dict:
        return {"predictions": self.predictions, "counters": self.counters,
                "exit_layer": self.exit_layer, "exited": self.exited, "flops": self.flops,
                "wall_time": self.wall_time, "label": self.label}


def patience_update(cnt_prev: int, y_i: int, y_prev: int | None, i: int) -> int:
    if i < 1:
        raise ValueError("layer index starts at 1")
    return cnt_prev + 1 if i > 1 and y_i == y_prev else 0


def fresh_classifier(seed: int, site: str, layer: int, d: int, num_classes: int):
    """Untrained d->C head; a pure function of its arguments."""
    rng = np.random.default_rng([seed, _SITE_CODE[site], layer, d, num_classes])
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, (d, num_classes)), rng.uniform(-bound, bound, (1, num_classes))


def internal_classify(h: np.ndarray, classifier) -> int:
    """argmax of the linear map; ``np.argmax`` returns the lowest index on ties."""
    W, b = classifier
    scores = np.asarray(h).reshape(1, -1) @ W + b
    return int(np.argmax(scores[0]))


def classifier_for(params: SiformerParams, cfg: EarlyExitConfig, layer: int):
    mc = params.config
    depth = mc.encoder_layers if cfg.site == "encoder" else mc.decoder_layers
    if not 1 <= layer <= depth:
        raise IndexError(f"{cfg.site} layer {layer} outside [1, {depth}]")
    if cfg.classifier_mode == "fresh":
        return fresh_classifier(cfg.seed, cfg.site, layer, mc.d_model, mc.num_classes)
    try:
        return (params[f"exit.{cfg.site}.{layer}.W"].data, params[f"exit.{cfg.site}.{layer}.b"].data)
    except KeyError:
        raise KeyError("checkpoint has no trained internal classifiers; "
                       "train with train_classifiers=True or use classifier_mode='fresh'") from None


def pooled_hidden(states, masks) -> np.ndarray:
    """Mean over the valid tokens of the stacked part outputs."""
    rows = [s.data[: int(m.sum())] for s, m in zip(states, masks)]
    return np.concatenate(rows).mean(axis=0)


def _run(seq, params: SiformerParams, cfg: EarlyExitConfig, trace: ExitTrace) -> int:
    mc = params.config
    mask = seq.mask if mc.use_padding_mask else np.ones(seq.num_frames, bool)
    inputs = stream_inputs(seq, mc)
    xs = {s: embed(inputs[s], s, params) for s in mc.streams}
    masks = {s: mask for s in mc.streams}
    y_prev, cnt = None, 0

    def check(i: int, h: np.ndarray) -> bool:
        nonlocal y_prev, cnt
        y = internal_classify(h, classifier_for(params, cfg, i))
        cnt = patience_update(cnt, y, y_prev, i)
        trace.predictions.append(y)
        trace.counters.append(cnt)
        y_prev = y
        if cnt >= cfg.patience:
            trace.exit_layer, trace.exited, trace.label = i, True, y
            return True
        return False

    for layer in range(mc.encoder_layers):
        for s in mc.streams:
            xs[s] = encoder_layer(xs[s], masks[s], s, layer, params)
        if cfg.enabled and cfg.site == "encoder":
            h = pooled_hidden([xs[s] for s in mc.streams], [masks[s] for s in mc.streams])
            if check(layer + 1, h):
                return layer + 1
        if mc.distilling and layer < mc.encoder_layers - 1:
            for s in mc.streams:
                xs[s], masks[s] = distill_step(xs[s], masks[s], s, layer, params)

    fmap = fuse(*(xs[s] for s in mc.streams))
    fmask = np.concatenate([masks[s] for s in mc.streams])
    q = params["query"]
    for layer in range(mc.decoder_layers):
        q = decoder_layer(q, fmap, fmask, layer, params)
        if cfg.enabled and cfg.site == "decoder" and check(layer + 1, q.data):
            return layer + 1
    probs = softmax_rows(classify(q, params)).data[0]
    trace.label = int(np.argmax(probs))
    return 0


def infer_adaptive(seq, params: SiformerParams, cfg: EarlyExitConfig = EarlyExitConfig()):
    """Layer-by-layer inference with early exit. Returns ``(label, ExitTrace)``."""
    mc = params.config
    trace = ExitTrace()
    start = time.perf_counter()
    with no_grad():
        _run(seq, params, cfg, trace)
    trace.wall_time = time.perf_counter() - start
    depth = mc.encoder_layers if cfg.site == "encoder" else mc.decoder_layers
    if not trace.exited:
        trace.exit_layer = depth
    trace.flops = count_flops(mc, seq.num_frames, trace.exit_layer if trace.exited else None,
                              cfg.site)
    return trace.label, trace


def evaluate(ds: LabeledDataset, params: SiformerParams, cfg: EarlyExitConfig = EarlyExitConfig(),
             traces: list | None = None) -> dict:
    """Top-1, mean wall time and FLOPs, parameter count and early-exit cases.

    An early-exit case is an instance that stopped before the last layer of
    the site. ``exits_fired`` also counts exits at the last layer, which
    still skip the decoder (encoder site) or the head (decoder site).
    Per-instance :class:`ExitTrace` objects are appended to ``traces`` when given.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    mc = params.config
    depth = mc.encoder_layers if cfg.site == "encoder" else mc.decoder_layers
    hits, total_time, total_flops, early, fired = 0, 0.0, 0, 0, 0
    for seq in ds:
        label, tr = infer_adaptive(seq, params, cfg)
        hits += label == seq.label
        total_time += tr.wall_time
        total_flops += tr.flops
        early += tr.exited and tr.exit_layer < depth
        fired += tr.exited
        if traces is not None:
            traces.append(tr)
    n = len(ds)
    return {"top1": hits / n, "avg_time": total_time / n, "avg_flops": total_flops / n,
            "params": params.count(), "early_exit_cases": early, "exits_fired": fired,
            "instances": n}


def robustness_sweep(ds: LabeledDataset, params: SiformerParams,
                     cfg: EarlyExitConfig = EarlyExitConfig(patience=OFF),
                     parts=("left_hand", "right_hand", "body"), ks=None, seeds=(0,),
                     prepare=None) -> list[dict]:
    """Top-1 accuracy with ``k`` random keypoints of one part removed.

    ``ks`` maps part -> iterable of k (default: 0..part size). ``prepare``
    (for example rectification plus normalisation) runs after removal.
    """
    rows = []
    for part in parts:
        size = LAYOUT.size(part)
        k_values = range(size + 1) if ks is None or part not in ks else ks[part]
        for k in k_values:
            if not 0 <= k <= size:
                raise ValueError(f"k={k} outside [0, {size}] for {part}")
            for seed in seeds:
                damaged = LabeledDataset(
                    tuple(remove_keypoints(s, part, k, seed * 100003 + j) for j, s in enumerate(ds)),
                    ds.num_classes)
                if prepare is not None:
                    damaged = prepare(damaged)
                top1 = evaluate(damaged, params, cfg)["top1"]
                rows.append({"part": part, "k": k, "seed": seed, "top1": top1})
    return rows


__all__ = [
    "EarlyExitConfig", "ExitTrace", "OFF", "SITES", "classifier_for", "evaluate",
    "fresh_classifier", "infer_adaptive", "internal_classify", "patience_update",
    "pooled_hidden", "robustness_sweep",
]
