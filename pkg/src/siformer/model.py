"""The feature-isolated transformer.

Left hand, right hand and body are projected to a shared width ``d`` and
encoded by three independent stacks; their outputs are stacked along the
token axis (left, right, body) and a single learnable class query
cross-attends to that map in the decoder. With ``feature_isolation=False``
the 54 keypoints go through one merged encoder instead (ablation).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import (
    ABSOLUTE,
    FULL,
    POSITIONAL_MODES,
    PROBSPARSE,
    AttentionConfig,
    distill_rows,
    PositionalEncoding,
    multi_head,
    positional_encode,
    probsparse_budget,
    sinusoid_table,
)
from .skeleton import NUM_KEYPOINTS, SkeletalSequence, partition_parts
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_rows,
    cross_entropy,
    gelu,
    grad_check,
    layer_norm,
    linear,
    no_grad,
    slice_rows,
    softmax_rows,
)

STREAMS = ("left", "right", "body")
STREAM_WIDTHS = {"left": 42, "right": 42, "body": 24, "all": 108}


@dataclass(frozen=True)
class SiformerConfig:
    num_classes: int = 100
    d_model: int = 108
    encoder_layers: int = 3
    decoder_layers: int = 2
    heads_left: int = 3
    heads_right: int = 3
    heads_body: int = 2
    heads_decoder: int = 6
    heads_merged: int = 6
    ffn_dim: int | None = None
    attention_mode: str = PROBSPARSE
    sampling_factor: float = 5.0
    positional: str = "frame_wise"
    distilling: bool = False
    feature_isolation: bool = True
    use_padding_mask: bool = True
    max_frames: int = 256
    attention_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if self.attention_mode not in (FULL, PROBSPARSE):
            raise ValueError(f"attention_mode must be {FULL!r} or {PROBSPARSE!r}")
        if self.positional not in POSITIONAL_MODES:
            raise ValueError(f"positional must be one of {POSITIONAL_MODES}")
        if self.sampling_factor <= 0:
            raise ValueError("sampling_factor must be positive")
        for name in ("heads_left", "heads_right", "heads_body", "heads_decoder", "heads_merged"):
            h = getattr(self, name)
            if h < 1 or self.d_model % h:
                raise ValueError(f"d_model={self.d_model} not divisible by {name}={h}")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.d_model

    @property
    def streams(self) -> tuple[str, ...]:
        return STREAMS if self.feature_isolation else ("all",)

    def heads(self, stream: str) -> int:
        return {"left": self.heads_left, "right": self.heads_right, "body": self.heads_body,
                "all": self.heads_merged, "decoder": self.heads_decoder}[stream]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> SiformerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SiformerParams:
    config: SiformerConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self, include_exits: bool = False) -> int:
        return sum(t.data.size for k, t in self.tensors.items()
                   if t.requires_grad and (include_exits or not k.startswith("exit.")))

    def group(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def positional(self, stream: str) -> PositionalEncoding:
        cfg = self.config
        if cfg.positional == ABSOLUTE:
            return PositionalEncoding(ABSOLUTE, Tensor(sinusoid_table(cfg.max_frames, cfg.d_model)))
        return PositionalEncoding(cfg.positional, self.tensors[f"{stream}.pos"])


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _attention_block(t: dict, prefix: str, d: int, rng) -> None:
    # no key bias: it only shifts each score row and never receives gradient
    for name in ("q", "k", "v", "o"):
        t[f"{prefix}W{name}"] = _uniform(rng, d, (d, d))
        if name != "k":
            t[f"{prefix}b{name}"] = _uniform(rng, d, (1, d))


def _layer_block(t: dict, prefix: str, d: int, f: int, rng) -> None:
    _attention_block(t, f"{prefix}attn.", d, rng)
    t[f"{prefix}ln1.g"] = Tensor(np.ones((1, d)), requires_grad=True)
    t[f"{prefix}ln1.b"] = Tensor(np.zeros((1, d)), requires_grad=True)
    t[f"{prefix}ff1.W"] = _uniform(rng, d, (d, f))
    t[f"{prefix}ff1.b"] = _uniform(rng, d, (1, f))
    t[f"{prefix}ff2.W"] = _uniform(rng, f, (f, d))
    t[f"{prefix}ff2.b"] = _uniform(rng, f, (1, d))
    t[f"{prefix}ln2.g"] = Tensor(np.ones((1, d)), requires_grad=True)
    t[f"{prefix}ln2.b"] = Tensor(np.zeros((1, d)), requires_grad=True)


def init_params(cfg: SiformerConfig, seed: int = 0) -> SiformerParams:
    """Random initial weights; the set of names and shapes depends only on ``cfg``."""
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.ffn
    t: dict[str, Tensor] = {}
    for s in cfg.streams:
        w = STREAM_WIDTHS[s]
        t[f"{s}.proj.W"] = _uniform(rng, w, (w, d))
        t[f"{s}.proj.b"] = _uniform(rng, w, (1, d))
        if cfg.positional != ABSOLUTE:
            t[f"{s}.pos"] = PositionalEncoding.create(cfg.positional, cfg.max_frames, d, rng).values
        for layer in range(cfg.encoder_layers):
            _layer_block(t, f"{s}.enc{layer}.", d, f, rng)
            if cfg.distilling and layer < cfg.encoder_layers - 1:
                for k in range(3):
                    t[f"{s}.distill{layer}.W{k}"] = _uniform(rng, 3 * d, (d, d))
                t[f"{s}.distill{layer}.b"] = _uniform(rng, 3 * d, (1, d))
    t["query"] = Tensor(rng.uniform(-1.0, 1.0, (1, d)), requires_grad=True)
    for layer in range(cfg.decoder_layers):
        _layer_block(t, f"dec{layer}.", d, f, rng)
    t["head.W"] = _uniform(rng, d, (d, cfg.num_classes))
    t["head.b"] = _uniform(rng, d, (1, cfg.num_classes))
    for name, tensor in t.items():
        tensor.name = name
    return SiformerParams(cfg, t)


def parameter_count(cfg: SiformerConfig) -> int:
    """Trainable scalars for ``cfg`` (closed form, no allocation)."""
    d, f = cfg.d_model, cfg.ffn
    attn = 4 * d * d + 3 * d
    layer = attn + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    total = 0
    for s in cfg.streams:
        w = STREAM_WIDTHS[s]
        total += w * d + d
        total += {"frame_wise": cfg.max_frames, "element_wise": d}.get(cfg.positional, 0)
        total += cfg.encoder_layers * layer
        if cfg.distilling:
            total += max(cfg.encoder_layers - 1, 0) * (3 * d * d + d)
    total += d + cfg.decoder_layers * layer + d * cfg.num_classes + cfg.num_classes
    return total


# ---------------------------------------------------------------- forward pieces


def stream_inputs(seq: SkeletalSequence, cfg: SiformerConfig) -> dict[str, np.ndarray]:
    if cfg.feature_isolation:
        return dict(zip(STREAMS, partition_parts(seq)))
    return {"all": seq.coords.reshape(seq.num_frames, -1)}


def _attn_cfg(cfg: SiformerConfig, heads: int, mode: str, seed) -> AttentionConfig:
    return AttentionConfig(num_heads=heads, d_model=cfg.d_model, mode=mode,
                           factor=cfg.sampling_factor, seed=seed,
                           use_padding_mask=cfg.use_padding_mask)


def _stream_seed(cfg: SiformerConfig, stream: str, layer: int) -> int:
    return int(np.random.SeedSequence(
        [cfg.attention_seed, ("left", "right", "body", "all").index(stream), layer]
    ).generate_state(1)[0])


def embed(x: np.ndarray, stream: str, params: SiformerParams) -> Tensor:
    cfg = params.config
    if x.shape[1] != STREAM_WIDTHS[stream]:
        raise ShapeError(f"{stream} input has width {x.shape[1]}, expected {STREAM_WIDTHS[stream]}")
    if x.shape[0] > cfg.max_frames:
        raise ShapeError(f"{x.shape[0]} frames exceed max_frames={cfg.max_frames}")
    h = linear(Tensor(x), params[f"{stream}.proj.W"], params[f"{stream}.proj.b"])
    return positional_encode(h, params.positional(stream))


def _ffn_block(x: Tensor, p: dict) -> Tensor:
    return linear(gelu(linear(x, p["ff1.W"], p["ff1.b"])), p["ff2.W"], p["ff2.b"])


def encoder_layer(x: Tensor, mask: np.ndarray, stream: str, layer: int,
                  params: SiformerParams, stats=None) -> Tensor:
    """Self-attention + residual + LN, then feed-forward + residual + LN (post-norm)."""
    cfg = params.config
    p = params.group(f"{stream}.enc{layer}.")
    acfg = _attn_cfg(cfg, cfg.heads(stream), cfg.attention_mode, _stream_seed(cfg, stream, layer))
    a = multi_head(x, x, params.group(f"{stream}.enc{layer}.attn."), acfg, mask, mask, stats)
    x = layer_norm(add(x, a), p["ln1.g"], p["ln1.b"])
    return layer_norm(add(x, _ffn_block(x, p)), p["ln2.g"], p["ln2.b"])


def distill_step(x: Tensor, mask: np.ndarray, stream: str, layer: int,
                 params: SiformerParams) -> tuple[Tensor, np.ndarray]:
    """Halve the valid rows; padding is re-appended as zeros."""
    T = x.shape[0]
    v = int(mask.sum())
    out = distill_rows(slice_rows(x, 0, v), params.group(f"{stream}.distill{layer}."))
    T2, v2 = math.ceil(T / 2), out.shape[0]
    if T2 > v2:
        out = concat_rows([out, Tensor(np.zeros((T2 - v2, x.shape[1])))])
    return out, np.arange(T2) < v2


def encode_part(part_input: np.ndarray, stream: str, params: SiformerParams, mask=None,
                stats=None):
    """Run one isolated encoder stack.

    Returns ``(states, masks)``: ``states[0]`` is the projected and
    position-encoded input and ``states[i]`` the output of layer ``i``.
    """
    cfg = params.config
    mask = np.ones(part_input.shape[0], bool) if mask is None else np.asarray(mask, bool)
    x = embed(part_input, stream, params)
    states, masks = [x], [mask]
    for layer in range(cfg.encoder_layers):
        x = encoder_layer(x, mask, stream, layer, params, stats)
        states.append(x)
        masks.append(mask)
        if cfg.distilling and layer < cfg.encoder_layers - 1:
            x, mask = distill_step(x, mask, stream, layer, params)
    return states, masks


def fuse(*feature_maps) -> Tensor:
    """Stack part feature maps along the token axis (no mixing)."""
    widths = {f.shape[1] for f in feature_maps}
    if len(widths) != 1:
        raise ShapeError(f"feature maps differ in width: {[f.shape for f in feature_maps]}")
    return concat_rows(list(feature_maps))


def decoder_layer(q: Tensor, fmap: Tensor, fmask: np.ndarray, layer: int,
                  params: SiformerParams, stats=None) -> Tensor:
    cfg = params.config
    p = params.group(f"dec{layer}.")
    acfg = _attn_cfg(cfg, cfg.heads_decoder, FULL, 0)
    a = multi_head(q, fmap, params.group(f"dec{layer}.attn."), acfg, fmask, None, stats)
    q = layer_norm(add(q, a), p["ln1.g"], p["ln1.b"])
    return layer_norm(add(q, _ffn_block(q, p)), p["ln2.g"], p["ln2.b"])


def classify(q: Tensor, params: SiformerParams) -> Tensor:
    return linear(q, params["head.W"], params["head.b"])


def decode(fmap: Tensor, params: SiformerParams, fmask=None, stats=None):
    """Class query -> decoder layers -> logits. Returns (states, logits, probabilities)."""
    cfg = params.config
    fmask = np.ones(fmap.shape[0], bool) if fmask is None else fmask
    q = params["query"]
    states = [q]
    for layer in range(cfg.decoder_layers):
        q = decoder_layer(q, fmap, fmask, layer, params, stats)
        states.append(q)
    logits = classify(q, params)
    probs = softmax_rows(logits).data[0]
    return states, logits, probs


@dataclass
class ForwardTrace:
    encoder_states: dict[str, list[Tensor]]
    encoder_masks: dict[str, list[np.ndarray]]
    fused: Tensor
    fused_mask: np.ndarray
    decoder_states: list[Tensor]
    logits: Tensor
    probabilities: np.ndarray

    @property
    def label(self) -> int:
        return int(np.argmax(self.probabilities))


def forward(seq: SkeletalSequence, params: SiformerParams, stats=None) -> ForwardTrace:
    cfg = params.config
    mask = seq.mask if cfg.use_padding_mask else np.ones(seq.num_frames, bool)
    states, masks = {}, {}
    for stream, x in stream_inputs(seq, cfg).items():
        states[stream], masks[stream] = encode_part(x, stream, params, mask, stats)
    finals = [states[s][-1] for s in cfg.streams]
    fmask = np.concatenate([masks[s][-1] for s in cfg.streams])
    fmap = fuse(*finals)
    dec_states, logits, probs = decode(fmap, params, fmask, stats)
    return ForwardTrace(states, masks, fmap, fmask, dec_states, logits, probs)


def predict(seq: SkeletalSequence, params: SiformerParams) -> int:
    with no_grad():
        return forward(seq, params).label


# ---------------------------------------------------------------- FLOPs


def _attention_macs(cfg: SiformerConfig, L_q: int, L_k: int, mode: str) -> int:
    d = cfg.d_model
    if mode == FULL:
        return 2 * L_q * L_k * d
    u, U = probsparse_budget(L_q, L_k, cfg.sampling_factor)
    return (L_q * U + 2 * u * L_k) * d


def count_flops(cfg: SiformerConfig, T: int, exit_layer: int | None = None,
                site: str = "encoder") -> int:
    """Analytic FLOPs (2 per multiply-add) of one forward pass over T frames.

    Counted: input projections, Q/K/V/O projections, score and value
    products, feed-forward, distilling convolutions and the classifier.
    With ``exit_layer`` the pass stops after that layer of ``site``; an
    encoder-site exit skips the decoder and the classifier entirely.
    """
    if site not in ("encoder", "decoder"):
        raise ValueError("site must be 'encoder' or 'decoder'")
    depth = cfg.encoder_layers if site == "encoder" else cfg.decoder_layers
    if exit_layer is not None and not 1 <= exit_layer <= depth:
        raise ValueError(f"exit_layer={exit_layer} outside [1, {depth}]")
    d, f = cfg.d_model, cfg.ffn
    enc_layers = exit_layer if site == "encoder" and exit_layer is not None else cfg.encoder_layers
    macs = 0
    kv_rows = 0
    for s in cfg.streams:
        L = T
        macs += T * STREAM_WIDTHS[s] * d
        for layer in range(enc_layers):
            macs += 4 * L * d * d + _attention_macs(cfg, L, L, cfg.attention_mode) + 2 * L * d * f
            if cfg.distilling and layer < cfg.encoder_layers - 1 and layer < enc_layers - 1:
                macs += 3 * L * d * d
                L = math.ceil(L / 2)
        kv_rows += L
    if site == "encoder" and exit_layer is not None:
        return 2 * macs
    dec_layers = exit_layer if exit_layer is not None else cfg.decoder_layers
    for _ in range(dec_layers):
        macs += 2 * d * d + 2 * kv_rows * d * d + _attention_macs(cfg, 1, kv_rows, FULL)
        macs += 2 * d * f
    if exit_layer is None:
        macs += d * cfg.num_classes
    return 2 * macs


# ---------------------------------------------------------------- checkpoints


def save_params(params: SiformerParams, path: str | os.PathLike) -> None:
    """Single ``.npz`` file: config JSON plus every named array (exact round trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.data for k, v in params.tensors.items()}
    arrays["__config__"] = np.frombuffer(json.dumps(params.config.to_dict()).encode(), np.uint8)
    tmp = path.with_name(f".{path.name}.tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_params(path: str | os.PathLike) -> SiformerParams:
    with np.load(path) as z:
        cfg = SiformerConfig.from_dict(json.loads(bytes(z["__config__"]).decode()))
        tensors = {k: Tensor(z[k], requires_grad=True, name=k) for k in z.files
                   if k != "__config__"}
    return SiformerParams(cfg, tensors)


# ---------------------------------------------------------------- gradient check


def tiny_config(d: int = 12, frames: int = 4, num_classes: int = 3, **overrides) -> SiformerConfig:
    """One encoder layer per part and one decoder layer; sized for finite differences."""
    base = dict(num_classes=num_classes, d_model=d, encoder_layers=1, decoder_layers=1,
                max_frames=frames)
    base.update(overrides)
    return SiformerConfig(**base)


def model_grad_check(cfg: SiformerConfig, frames: int, seed: int = 0, eps: float = 1e-5,
                     tol: float = 1e-4):
    """Finite-difference check of forward + cross-entropy over every parameter."""
    rng = np.random.default_rng(seed)
    seq = SkeletalSequence(rng.uniform(0.0, 1.0, (frames, NUM_KEYPOINTS, 2)),
                           int(rng.integers(cfg.num_classes)), frames)
    params = init_params(cfg, seed)
    return grad_check(lambda: cross_entropy(forward(seq, params).logits, seq.label),
                      params.tensors, eps=eps, tol=tol)
