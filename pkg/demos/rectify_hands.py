"""Pull an over-bent synthetic hand back inside its joint ranges.

Run: python3 demos/rectify_hands.py
"""
import numpy as np

from siformer.rectify import RectifyConfig, audit_hands, bone_lengths, rectify_sequence
from siformer.skeleton import LAYOUT, SkeletalSequence
from siformer.synthetic import random_hand_poses

RIGHT = LAYOUT.range("right_hand")[0]

hands = random_hand_poses(200, seed=5)
coords = np.zeros((len(hands), 54, 2))
coords[:, RIGHT:RIGHT + 21] = hands
coords[:, 42:] = 0.5  # park the body somewhere harmless
seq = SkeletalSequence(coords, 0)


def worst(pts):
    errs = audit_hands(pts, 1.0)
    key = max(errs, key=lambda k: errs[k].max(initial=0.0))
    return key, errs[key].max(initial=0.0), sum(int((e > 1e-9).sum()) for e in errs.values())


key, eps, n = worst(hands)
print(f"before: {n} violations, worst {key[0]} {key[1]} off by {eps:.1f} deg")

for alpha in (0.0, 0.4, 1.0):
    fixed = rectify_sequence(seq, RectifyConfig(alpha=alpha)).coords[:, RIGHT:RIGHT + 21]
    key, eps, n = worst(fixed)
    drift = np.abs(bone_lengths(fixed) - bone_lengths(hands)).max()
    print(f"alpha={alpha:.1f}: {n:4d} violations, worst {eps:7.3f} deg, bone drift {drift:.1e}")
