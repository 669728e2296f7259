"""How many query-key products ProbSparse attention skips, and what it costs.

Run: python3 demos/sparse_attention_budget.py
"""
import numpy as np

from siformer.attention import (
    PROBSPARSE, AttentionConfig, full_attention, probsparse_attention, probsparse_budget,
)
from siformer.model import SiformerConfig, count_flops

rng = np.random.default_rng(0)
print(" L   u  pairs(sparse)  pairs(full)  rows differing")
for L in (8, 30, 120, 500):
    Q, K, V = (rng.normal(size=(L, 16)) for _ in range(3))
    sparse, full = {}, {}
    a = probsparse_attention(Q, K, V, AttentionConfig(mode=PROBSPARSE, factor=5.0), stats=sparse)
    b = full_attention(Q, K, V, stats=full)
    u, _ = probsparse_budget(L, L, 5.0)
    changed = int((np.abs(a.data - b.data).max(axis=1) > 1e-12).sum())
    print(f"{L:3d} {u:3d} {sparse['pairs']:14d} {full['pairs']:12d} {changed:15d}")

# Whole-model view at the default width.
for T in (30, 120):
    dense = count_flops(SiformerConfig(num_classes=100, attention_mode="full"), T)
    sparse = count_flops(SiformerConfig(num_classes=100), T)
    print(f"T={T}: full {dense / 1e9:.4f} GFLOPs, probsparse {sparse / 1e9:.4f} GFLOPs")
