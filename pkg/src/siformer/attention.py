"""Scaled dot-product attention, ProbSparse query selection, positional
encodings and the optional distilling block.

``attention_core`` is the single differentiable kernel behind every
attention call. Each head computes exact softmax rows for its *selected*
queries; every other query row gets uniform weights over the unmasked
keys, i.e. the mean of the value rows (what a zero score row softmaxes to).
Full attention is the special case where every query is selected.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    custom_op,
    elu,
    linear,
    matmul,
    maxpool_rows,
    slice_rows,
)

FULL = "full"
PROBSPARSE = "probsparse"


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 1
    d_model: int = 0
    mode: str = FULL
    factor: float = 5.0
    seed: int = 0
    use_padding_mask: bool = True
    top_u: int | None = None  # overrides ceil(c ln L_Q)
    sample_k: int | None = None  # overrides ceil(c ln L_K)

    def __post_init__(self):
        if self.mode not in (FULL, PROBSPARSE):
            raise ValueError(f"mode must be {FULL!r} or {PROBSPARSE!r}")
        if self.num_heads < 1 or (self.d_model and self.d_model % self.num_heads):
            raise ValueError(f"d_model={self.d_model} not divisible by {self.num_heads} heads")
        if self.factor <= 0:
            raise ValueError("sampling factor must be positive")


def probsparse_budget(L_Q: int, L_K: int, factor: float, top_u=None, sample_k=None):
    """(u, U): queries kept and keys sampled per query."""
    def clamp(v, hi):
        return max(1, min(hi, v))

    u = top_u if top_u is not None else math.ceil(factor * math.log(L_Q)) if L_Q > 1 else 1
    U = sample_k if sample_k is not None else math.ceil(factor * math.log(L_K)) if L_K > 1 else 1
    return clamp(u, L_Q), clamp(U, L_K)


def _valid(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"mask has shape {mask.shape}, expected ({n},)")
    return mask


def attention_core(Q, K, V, num_heads: int = 1, key_mask=None, selected=None,
                   stats: dict | None = None) -> Tensor:
    """Multi-head attention on already-projected Q (L_Q x d), K, V (L_K x d).

    ``selected`` is a bool array (heads x L_Q); None selects every query.
    ``stats['pairs']`` (if given) is incremented by the number of q.k
    products evaluated.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    Lq, d = Q.shape
    Lk = K.shape[0]
    if K.shape[1] != d or V.shape != (Lk, d):
        raise ShapeError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if d % num_heads:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    keys = _valid(key_mask, Lk)
    n_keys = int(keys.sum())
    if n_keys == 0:
        raise ValueError("attention: every key is masked")
    if selected is None:
        selected = np.ones((num_heads, Lq), dtype=bool)
    dh = d // num_heads
    inv = 1.0 / math.sqrt(dh)
    Qd, Kd, Vd = Q.data, K.data, V.data
    uniform = np.where(keys, 1.0 / n_keys, 0.0)
    out = np.empty((Lq, d))
    saved = []
    for h in range(num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        sel = np.flatnonzero(selected[h])
        A = np.tile(uniform, (Lq, 1))
        if sel.size:
            # einsum keeps every row independent of which others are computed,
            # so sparse rows are bit-identical to the same rows in full mode
            S = np.einsum("id,jd->ij", Qd[sel, cols], Kd[:, cols]) * inv
            S = np.where(keys, S, -np.inf)
            S = S - S.max(axis=1, keepdims=True)
            E = np.exp(S)
            A[sel] = E / E.sum(axis=1, keepdims=True)
        out[:, cols] = np.einsum("ij,jd->id", A, Vd[:, cols])
        saved.append((cols, sel, A))
        if stats is not None:
            stats["pairs"] = stats.get("pairs", 0) + int(sel.size) * n_keys

    def grad_fn(g):
        dQ = np.zeros_like(Qd)
        dK = np.zeros_like(Kd)
        dV = np.zeros_like(Vd)
        for cols, sel, A in saved:
            gh = g[:, cols]
            dV[:, cols] = A.T @ gh
            if sel.size:
                As = A[sel]
                dA = gh[sel] @ Vd[:, cols].T
                dS = As * (dA - (dA * As).sum(axis=1, keepdims=True)) * inv
                dQ[sel, cols] = dS @ Kd[:, cols]
                dK[:, cols] = dS.T @ Qd[sel, cols]
        return dQ, dK, dV

    return custom_op(out, (Q, K, V), grad_fn)


def full_attention(Q, K, V, mask=None, stats=None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with masked keys excluded."""
    return attention_core(Q, K, V, 1, mask, None, stats)


def sparsity_scores(Q, K, sample_count: int, seed, key_mask=None, query_mask=None,
                    stats: dict | None = None) -> np.ndarray:
    """Max-minus-mean of scaled scores over ``sample_count`` sampled keys per query.

    Keys are drawn uniformly without replacement from the unmasked keys,
    only for eligible queries (others score 0), so padding never changes
    the draws of real queries.
    """
    Qd = as_tensor(Q).data
    Kd = as_tensor(K).data
    Lq, d = Qd.shape
    keys = np.flatnonzero(_valid(key_mask, Kd.shape[0]))
    if not 1 <= sample_count <= keys.size:
        raise ValueError(f"sample_count={sample_count} outside [1, {keys.size}]")
    rows = np.flatnonzero(_valid(query_mask, Lq))
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((rows.size, keys.size)), axis=1)[:, :sample_count]
    sampled = Kd[keys[picks]]  # rows x U x d
    scores = np.einsum("rd,rud->ru", Qd[rows], sampled) / math.sqrt(d)
    M = np.zeros(Lq)
    # mean(max - s) == max - mean(s), but is exactly 0 when all scores agree
    M[rows] = (scores.max(axis=1, keepdims=True) - scores).mean(axis=1)
    if stats is not None:
        stats["pairs"] = stats.get("pairs", 0) + rows.size * sample_count
    return M


def top_queries(M: np.ndarray, u: int, query_mask=None) -> np.ndarray:
    """Indices of the ``u`` largest scores among eligible queries; ties -> lower index."""
    eligible = _valid(query_mask, M.size)
    order = np.argsort(-M, kind="stable")
    return order[eligible[order]][:u]


def probsparse_select(Qd: np.ndarray, Kd: np.ndarray, num_heads: int, cfg: AttentionConfig,
                      key_mask=None, query_mask=None, stats=None) -> np.ndarray:
    """Per-head boolean selection (heads x L_Q) of the dominant queries."""
    Lq, d = Qd.shape
    dh = d // num_heads
    n_q = int(_valid(query_mask, Lq).sum())
    n_k = int(_valid(key_mask, Kd.shape[0]).sum())
    u, U = probsparse_budget(n_q, n_k, cfg.factor, cfg.top_u, cfg.sample_k)
    selected = np.zeros((num_heads, Lq), dtype=bool)
    for h in range(num_heads):
        cols = slice(h * dh, (h + 1) * dh)
        seed = np.random.SeedSequence([cfg.seed, h])
        M = sparsity_scores(Qd[:, cols], Kd[:, cols], U, seed, key_mask, query_mask, stats)
        selected[h, top_queries(M, u, query_mask)] = True
    return selected


def probsparse_attention(Q, K, V, cfg: AttentionConfig, mask=None, query_mask=None,
                         stats=None) -> Tensor:
    """Single-head ProbSparse attention."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if K.shape[0] != V.shape[0] or Q.shape[1] != K.shape[1]:
        raise ShapeError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape}")
    sel = probsparse_select(Q.data, K.data, 1, cfg, mask, query_mask, stats)
    return attention_core(Q, K, V, 1, mask, sel, stats)


def multi_head(X_q, X_kv, weights: dict, cfg: AttentionConfig, key_mask=None,
               query_mask=None, stats=None) -> Tensor:
    """Project, attend per head (full or ProbSparse), concatenate, project out.

    ``weights`` holds ``Wq, Wk, Wv, Wo`` (d x d, heads occupy contiguous
    column blocks) and optional biases ``bq, bv, bo``.
    """
    Q = linear(X_q, weights["Wq"], weights.get("bq"))
    K = linear(X_kv, weights["Wk"], weights.get("bk"))
    V = linear(X_kv, weights["Wv"], weights.get("bv"))
    mask = key_mask if cfg.use_padding_mask else None
    qmask = query_mask if cfg.use_padding_mask else None
    selected = None
    if cfg.mode == PROBSPARSE:
        selected = probsparse_select(Q.data, K.data, cfg.num_heads, cfg, mask, qmask, stats)
    heads = attention_core(Q, K, V, cfg.num_heads, mask, selected, stats)
    return linear(heads, weights["Wo"], weights.get("bo"))


# ---------------------------------------------------------------- positions

FRAME_WISE = "frame_wise"
ELEMENT_WISE = "element_wise"
ABSOLUTE = "absolute_sinusoidal"
POSITIONAL_MODES = (FRAME_WISE, ELEMENT_WISE, ABSOLUTE)


def sinusoid_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (i - i % 2) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class PositionalEncoding:
    """``values``: frame_wise (max_frames x 1), element_wise (1 x d), absolute (max_frames x d)."""

    mode: str
    values: Tensor

    def __post_init__(self):
        if self.mode not in POSITIONAL_MODES:
            raise ValueError(f"positional mode must be one of {POSITIONAL_MODES}")

    @classmethod
    def create(cls, mode: str, max_frames: int, d: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if mode == FRAME_WISE:
            return cls(mode, Tensor(rng.random((max_frames, 1)), requires_grad=True))
        if mode == ELEMENT_WISE:
            return cls(mode, Tensor(rng.random((1, d)), requires_grad=True))
        return cls(mode, Tensor(sinusoid_table(max_frames, d)))

    def dense(self, T: int, d: int) -> np.ndarray:
        """The full T x d matrix that gets added."""
        v = self.values.data
        if self.mode == ELEMENT_WISE:
            return np.repeat(v, T, axis=0)
        return np.broadcast_to(v[:T], (T, d)).copy()


def positional_encode(X, pe: PositionalEncoding) -> Tensor:
    X = as_tensor(X)
    T, d = X.shape
    P = pe.values
    if pe.mode == ELEMENT_WISE:
        if P.shape != (1, d):
            raise ShapeError(f"element-wise encoding is {P.shape}, input width {d}")
        return add(X, P)
    if P.shape[0] < T:
        raise ShapeError(f"encoding covers {P.shape[0]} frames, input has {T}")
    if pe.mode == FRAME_WISE:
        if P.shape[1] != 1:
            raise ShapeError("frame-wise encoding must be max_frames x 1")
        return add(X, slice_rows(P, 0, T))
    if P.shape[1] != d:
        raise ShapeError(f"sinusoidal table width {P.shape[1]} vs input width {d}")
    return add(X, slice_rows(P, 0, T))


# ---------------------------------------------------------------- distilling


def distill_rows(X, weights: dict) -> Tensor:
    """:func:`distill_layer` without the length check (a single row passes through the pool)."""
    X = as_tensor(X)
    L = X.shape[0]
    prev = Tensor(np.eye(L, k=-1))
    nxt = Tensor(np.eye(L, k=1))
    conv = add(linear(X, weights["W1"], weights["b"]),
               add(linear(matmul(prev, X), weights["W0"]), linear(matmul(nxt, X), weights["W2"])))
    return maxpool_rows(elu(conv), window=3, stride=2)


def distill_layer(X, weights: dict) -> Tensor:
    """Conv1d (kernel 3, same padding) -> ELU -> max-pool (window 3, stride 2).

    ``weights``: ``W0, W1, W2`` (d x d taps for rows t-1, t, t+1) and ``b``.
    Output length is ceil(L / 2).
    """
    if as_tensor(X).shape[0] < 2:
        raise ValueError("distilling needs at least 2 rows")
    return distill_rows(X, weights)
