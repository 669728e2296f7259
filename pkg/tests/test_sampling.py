import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siformer.sampling import (
    AugmentConfig,
    SmoteConfig,
    arm_rotate_sequence,
    augment,
    augment_rng,
    centroid,
    homography,
    nearest_neighbors,
    normalize_parts,
    perspective_sequence,
    rotate_sequence,
    smote_balance,
    smote_interpolate,
    smote_samples,
    squeeze_sequence,
)
from siformer.skeleton import LAYOUT, PARTS, LabeledDataset, SkeletalSequence


def seq_of(T=4, label=0, valid=None, seed=0):
    coords = np.random.default_rng(seed).uniform(0.1, 0.9, (T, 54, 2))
    if valid is not None:
        coords[valid:] = 0
    return SkeletalSequence(coords, label, valid)


# ---------------------------------------------------------------- SMOTE


def test_interpolation_endpoints_and_midpoint():
    a, b = np.array([0.0, 2.0]), np.array([4.0, 6.0])
    assert np.array_equal(smote_interpolate(a, b, 0.0), a)
    assert np.array_equal(smote_interpolate(a, b, 1.0), b)
    assert np.array_equal(smote_interpolate(a, b, 0.25), [1.0, 3.0])


def test_nearest_neighbors_against_brute_force(rng):
    X = rng.normal(size=(12, 5))
    got = nearest_neighbors(X, 3)
    for i in range(12):
        d = [(np.linalg.norm(X[i] - X[j]), j) for j in range(12) if j != i]
        assert sorted(got[i].tolist()) == sorted(j for _, j in sorted(d)[:3])


def test_samples_lie_on_neighbour_segments(rng):
    X = rng.normal(size=(6, 4))
    rows, prov = smote_samples(X, 30, 2, np.random.default_rng(0))
    nbrs = nearest_neighbors(X, 2)
    for row, (i, j, w) in zip(rows, prov):
        assert j in nbrs[i] and 0 <= w < 1
        assert np.abs(row - (X[i] + w * (X[j] - X[i]))).max() < 1e-12
    with pytest.raises(ValueError):
        smote_samples(X[:1], 1, 1, np.random.default_rng(0))


def test_balance_counts_and_originals_kept():
    seqs = [seq_of(3, 0, seed=i) for i in range(3)] + [seq_of(3, 1, seed=10 + i) for i in range(5)]
    ds = LabeledDataset(tuple(seqs), 2)
    assert ds.class_counts == {0: 3, 1: 5}
    out = smote_balance(ds, SmoteConfig(k_neighbors=2, seed=1))
    assert out.class_counts == {0: 5, 1: 5}
    assert all(a is b for a, b in zip(out.sequences[:8], ds.sequences))
    again = smote_balance(ds, SmoteConfig(k_neighbors=2, seed=1))
    assert all(np.array_equal(a.coords, b.coords) for a, b in zip(out, again))


def test_balance_requires_padding_and_valid_k():
    ds = LabeledDataset((seq_of(3, 0), seq_of(4, 0, seed=1)), 1)
    with pytest.raises(ValueError):
        smote_balance(ds)
    with pytest.raises(ValueError):
        SmoteConfig(k_neighbors=0)


# ---------------------------------------------------------------- normalisation


def test_normalize_maps_each_part_to_unit_box():
    out = normalize_parts(seq_of(5, valid=4))
    for part in PARTS:
        lo, hi = LAYOUT.range(part)
        block = out.coords[:4, lo:hi].reshape(-1, 2)
        assert np.allclose(block.min(axis=0), 0) and np.allclose(block.max(axis=0), 1)
    assert np.all(out.coords[4:] == 0)


def test_normalize_keeps_missing_and_flat_axes():
    c = seq_of(2).coords.copy()
    c[:, 3] = 0.0
    c[:, 42:, 1] = 0.7  # body has no vertical extent
    out = normalize_parts(SkeletalSequence(c)).coords
    assert np.all(out[:, 3] == 0)
    assert np.all(out[:, 42:, 1] == 0.5)


def test_normalized_origin_point_stays_present():
    c = np.zeros((1, 54, 2))
    c[0, :21] = np.linspace(0.2, 0.6, 21)[:, None]  # corner point maps to the origin
    c[0, 21:] = 0.3
    out = normalize_parts(SkeletalSequence(c)).coords
    assert np.any(out[0, 0] != 0) and np.abs(out[0, 0]).max() < 1e-300
    assert np.array_equal(normalize_parts(SkeletalSequence(out)).coords, out)


@given(st.integers(0, 10_000))
def test_normalize_is_idempotent(seed):
    once = normalize_parts(seq_of(3, seed=seed))
    assert np.abs(normalize_parts(once).coords - once.coords).max() < 1e-12


# ---------------------------------------------------------------- augmentation


def test_disabled_or_zero_magnitudes_are_identity():
    s = seq_of()
    assert augment(s, AugmentConfig(enabled=False), augment_rng(0, 0)) is s
    quiet = AugmentConfig(apply_probability=0.0, gaussian_sigma=0.0)
    assert augment(s, quiet, augment_rng(0, 0)) is s
    assert np.allclose(rotate_sequence(s, 0.0).coords, s.coords, atol=1e-15)
    assert np.abs(squeeze_sequence(s, 1.0).coords - s.coords).max() < 1e-15


def test_rotation_inverse_and_rigidity():
    s = seq_of()
    c = centroid(s)
    r = rotate_sequence(s, 12.0, c)
    back = rotate_sequence(r, -12.0, c)
    assert np.abs(back.coords - s.coords).max() < 1e-12
    d0 = np.linalg.norm(s.coords[0, 0] - s.coords[0, 1])
    d1 = np.linalg.norm(r.coords[0, 0] - r.coords[0, 1])
    assert abs(d0 - d1) < 1e-12


def test_squeeze_scales_x_only():
    s = seq_of()
    out = squeeze_sequence(s, 0.5, center=(0.0, 0.0)).coords
    assert np.allclose(out[..., 0], s.coords[..., 0] * 0.5)
    assert np.array_equal(out[..., 1], s.coords[..., 1])


def test_homography_maps_corners():
    src = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    dst = src + np.array([[0.1, 0], [0, 0.05], [-0.1, 0], [0, -0.02]])
    H = homography(src, dst)
    q = np.c_[src, np.ones(4)] @ H.T
    assert np.abs(q[:, :2] / q[:, 2:] - dst).max() < 1e-12
    s = seq_of()
    assert np.abs(perspective_sequence(s, np.zeros((4, 2))).coords - s.coords).max() < 1e-12


def test_arm_rotation_moves_only_one_forearm():
    s = seq_of()
    out = arm_rotate_sequence(s, "left", 20.0).coords
    lo, hi = LAYOUT.range("left_hand")
    wrist = LAYOUT.body_index("left_wrist")
    moved = np.zeros(54, bool)
    moved[lo:hi] = True
    moved[wrist] = True
    assert np.array_equal(out[:, ~moved], s.coords[:, ~moved])
    elbow = s.coords[0, LAYOUT.body_index("left_elbow")]
    before = np.linalg.norm(s.coords[0, wrist] - elbow)
    assert abs(np.linalg.norm(out[0, wrist] - elbow) - before) < 1e-12


def test_augment_never_touches_missing_or_padding():
    c = seq_of(5, valid=3).coords.copy()
    c[:3, 10] = 0.0
    s = SkeletalSequence(c, 0, 3)
    cfg = AugmentConfig(apply_probability=1.0)
    for i in range(20):
        out = augment(s, cfg, augment_rng(7, i)).coords
        assert np.all(out[3:] == 0) and np.all(out[:3, 10] == 0)


def test_augment_rng_is_deterministic_per_sample():
    s, cfg = seq_of(), AugmentConfig(apply_probability=1.0)
    a = augment(s, cfg, augment_rng(3, 5, 2)).coords
    b = augment(s, cfg, augment_rng(3, 5, 2)).coords
    c = augment(s, cfg, augment_rng(3, 6, 2)).coords
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_jitter_is_unbiased():
    s = seq_of(2)
    cfg = AugmentConfig(apply_probability=0.0, gaussian_sigma=0.01)
    diffs = np.stack([augment(s, cfg, augment_rng(0, i)).coords - s.coords for i in range(400)])
    # standard error of the mean is 0.01 / sqrt(400 * 216) ~ 3.4e-5
    assert abs(diffs.mean()) < 2e-4
    assert abs(diffs.std() - 0.01) < 5e-4


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(apply_probability=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(rotate_max_deg=-1.0)


@given(st.floats(-180, 180), st.integers(0, 1000))
def test_rotation_preserves_centroid(deg, seed):
    s = seq_of(seed=seed)
    assert np.abs(centroid(rotate_sequence(s, deg)) - centroid(s)).max() < 1e-12
    assert math.isfinite(deg)
