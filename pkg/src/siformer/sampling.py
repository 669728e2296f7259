"""Class balancing (SMOTE), part-wise normalisation and keypoint augmentation."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace

import numpy as np

from .skeleton import LAYOUT, PARTS, LabeledDataset, SkeletalSequence


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


def smote_interpolate(x_i: np.ndarray, x_k: np.ndarray, w: float) -> np.ndarray:
    return x_i + w * (x_k - x_i)


def nearest_neighbors(X: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows of ``X`` (exact, Euclidean)."""
    sq = (X * X).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smote_samples(X: np.ndarray, n_new: int, k: int, rng: np.random.Generator):
    """Draw ``n_new`` synthetic rows from the class matrix ``X`` (n x D).

    Returns ``(samples, provenance)`` where provenance rows are (i, k, w).
    """
    n = X.shape[0]
    if n < 2:
        raise ValueError("SMOTE needs at least two samples in a class")
    k = min(k, n - 1)
    nbrs = nearest_neighbors(X, k)
    out = np.empty((n_new, X.shape[1]))
    prov = []
    for s in range(n_new):
        i = int(rng.integers(n))
        j = int(nbrs[i, rng.integers(k)])
        w = float(rng.random())
        out[s] = smote_interpolate(X[i], X[j], w)
        prov.append((i, j, w))
    return out, prov


def smote_balance(ds: LabeledDataset, cfg: SmoteConfig = SmoteConfig()) -> LabeledDataset:
    """Oversample every class up to the largest class count.

    Originals keep their position; synthetic samples are appended per class.
    """
    if not ds.is_padded():
        raise ValueError("SMOTE needs a padded dataset (uniform frame count)")
    rng = np.random.default_rng(cfg.seed)
    N = max(ds.class_counts.values())
    shape = ds[0].coords.shape
    new = []
    for c in range(ds.num_classes):
        members = [s for s in ds if s.label == c]
        need = N - len(members)
        if need == 0:
            continue
        X = np.stack([s.flat() for s in members])
        rows, prov = smote_samples(X, need, cfg.k_neighbors, rng)
        for row, (i, j, _) in zip(rows, prov):
            valid = max(members[i].valid_frames, members[j].valid_frames)
            new.append(SkeletalSequence(row.reshape(shape), c, valid))
    return LabeledDataset(ds.sequences + tuple(new), ds.num_classes)


# ---------------------------------------------------------------- normalisation


_TINY = np.nextafter(0.0, 1.0)


def normalize_parts(seq: SkeletalSequence) -> SkeletalSequence:
    """Map each part's bounding box (over valid frames) onto the unit square.

    Missing keypoints, stored as exact (0, 0), are left out of the box and
    stay at zero. A box axis thinner than 1e-9 collapses to 0.5. A present
    point that would land on the origin gets the smallest positive float as
    its x, so it is not mistaken for a missing keypoint later.
    """
    coords = seq.coords.copy()
    v = seq.valid_frames
    for part in PARTS:
        lo, hi = LAYOUT.range(part)
        block = coords[:v, lo:hi]
        present = np.any(block != 0, axis=-1)
        if not present.any():
            continue
        pts = block[present]
        mins, maxs = pts.min(axis=0), pts.max(axis=0)
        span = maxs - mins
        flat = span < 1e-9
        scaled = np.where(flat, 0.5, (pts - mins) / np.where(flat, 1.0, span))
        scaled[~np.any(scaled != 0, axis=-1), 0] = _TINY
        block[present] = scaled
        coords[:v, lo:hi] = block
    return replace(seq, coords=coords)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    apply_probability: float = 0.5
    rotate_max_deg: float = 15.0
    squeeze_max_frac: float = 0.15
    perspective_max_frac: float = 0.10
    arm_rotate_max_deg: float = 10.0
    gaussian_sigma: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")
        mags = (self.rotate_max_deg, self.squeeze_max_frac, self.perspective_max_frac,
                self.arm_rotate_max_deg, self.gaussian_sigma)
        if min(mags) < 0:
            raise ValueError("augmentation magnitudes must be >= 0")


AUGMENTATIONS = ("rotate", "squeeze", "perspective", "arm_rotate")


def _present(coords: np.ndarray) -> np.ndarray:
    return np.any(coords != 0, axis=-1)


def _apply_points(seq: SkeletalSequence, fn) -> SkeletalSequence:
    """Apply ``fn`` to the non-missing points of the valid frames."""
    coords = seq.coords.copy()
    block = coords[: seq.valid_frames]
    mask = _present(block)
    block[mask] = fn(block[mask])
    return replace(seq, coords=coords)


def centroid(seq: SkeletalSequence) -> np.ndarray:
    block = seq.coords[: seq.valid_frames]
    pts = block[_present(block)]
    return pts.mean(axis=0) if len(pts) else np.zeros(2)


def _rotation(deg: float) -> np.ndarray:
    r = math.radians(deg)
    return np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])


def rotate_sequence(seq: SkeletalSequence, deg: float, center=None) -> SkeletalSequence:
    c = centroid(seq) if center is None else np.asarray(center, dtype=float)
    R = _rotation(deg)
    return _apply_points(seq, lambda p: (p - c) @ R.T + c)


def squeeze_sequence(seq: SkeletalSequence, factor: float, center=None) -> SkeletalSequence:
    """Scale x about the centroid by ``factor``."""
    c = centroid(seq) if center is None else np.asarray(center, dtype=float)

    def fn(p):
        out = p.copy()
        out[:, 0] = c[0] + factor * (p[:, 0] - c[0])
        return out

    return _apply_points(seq, fn)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending the four ``src`` corners onto ``dst``."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(A, float), np.array(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def perspective_sequence(seq: SkeletalSequence, corner_shift: np.ndarray) -> SkeletalSequence:
    """Warp so the bounding-box corners move by ``corner_shift`` (4 x 2, box units)."""
    block = seq.coords[: seq.valid_frames]
    pts = block[_present(block)]
    if len(pts) == 0:
        return seq
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    size = np.maximum(hi - lo, 1e-9)
    src = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    dst = src + np.asarray(corner_shift) * size
    H = homography(src, dst)

    def fn(p):
        q = np.c_[p, np.ones(len(p))] @ H.T
        return q[:, :2] / q[:, 2:3]

    return _apply_points(seq, fn)


def arm_rotate_sequence(seq: SkeletalSequence, side: str, deg: float) -> SkeletalSequence:
    """Rotate one forearm (wrist plus that hand) about its elbow, frame by frame."""
    elbow = LAYOUT.body_index(f"{side}_elbow")
    lo, hi = LAYOUT.range(f"{side}_hand")
    moving = [LAYOUT.body_index(f"{side}_wrist"), *range(lo, hi)]
    coords = seq.coords.copy()
    R = _rotation(deg)
    for t in range(seq.valid_frames):
        c = coords[t, elbow]
        if not np.any(c != 0):
            continue
        pts = coords[t, moving]
        mask = _present(pts)
        pts[mask] = (pts[mask] - c) @ R.T + c
        coords[t, moving] = pts
    return replace(seq, coords=coords)


def augment_rng(seed: int, index: int, epoch: int = 0) -> random.Random:
    """Per-sample generator: draws depend only on (seed, epoch, index)."""
    return random.Random(f"{seed}:{epoch}:{index}")


def augment(seq: SkeletalSequence, cfg: AugmentConfig, rng: random.Random) -> SkeletalSequence:
    """Maybe apply one random geometric transform, then Gaussian jitter.

    Missing keypoints and padded frames are never touched.
    """
    if not cfg.enabled:
        return seq
    out = seq
    if rng.random() < cfg.apply_probability:
        kind = rng.choice(AUGMENTATIONS)
        if kind == "rotate":
            out = rotate_sequence(out, rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg))
        elif kind == "squeeze":
            out = squeeze_sequence(out, rng.uniform(1.0 - cfg.squeeze_max_frac, 1.0))
        elif kind == "perspective":
            m = cfg.perspective_max_frac
            shift = np.array([[rng.uniform(-m, m) for _ in range(2)] for _ in range(4)])
            out = perspective_sequence(out, shift)
        else:
            side = rng.choice(("left", "right"))
            out = arm_rotate_sequence(
                out, side, rng.uniform(-cfg.arm_rotate_max_deg, cfg.arm_rotate_max_deg))
    if cfg.gaussian_sigma > 0:
        noise_rng = np.random.default_rng(rng.getrandbits(63))
        out = _apply_points(out, lambda p: p + noise_rng.normal(0.0, cfg.gaussian_sigma, p.shape))
    return out
