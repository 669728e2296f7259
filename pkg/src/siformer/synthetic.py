"""Parametric synthetic glosses for desk-scale experiments.

Each class is a distinct motion: both arms swing on class-specific
sinusoids, the hands follow the wrists, and every finger holds a
class-specific curl. Hands are built by forward kinematics using the same
angle conventions as :mod:`siformer.rectify`, so a pose generated without
injected violations satisfies the joint-range table.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rectify import FINGERS
from .skeleton import LAYOUT, NUM_KEYPOINTS, LabeledDataset, SkeletalSequence

# palm-ray offsets (deg) and lengths relative to the palm length
_RAYS = {"index": 8.0, "middle": 0.0, "ring": -8.0, "little": -16.0}
_PALM = {"index": 0.95, "middle": 1.0, "ring": 0.95, "little": 0.85}
_PHALANX = (0.45, 0.28, 0.22)
_THUMB_BASE = 40.0
_THUMB_LEN = (0.35, 0.35, 0.3, 0.25)


def _unit(rad):
    return np.stack([np.cos(rad), np.sin(rad)], axis=-1)


def hand_pose(wrist, heading_deg, scale, angles: dict, sign: float) -> np.ndarray:
    """Forward kinematics for one or many hands.

    ``angles`` maps joint names to FE angles in degrees (``index_mcp``,
    ``index_pip``, ``index_dip``, ..., ``thumb_cmc``, ``thumb_mcp``,
    ``thumb_ip``); entries may be arrays sharing a leading shape with
    ``wrist`` (..., 2). Returns (..., 21, 2).
    """
    wrist = np.asarray(wrist, dtype=float)
    heading = np.asarray(heading_deg, dtype=float)
    lead = np.broadcast_shapes(wrist.shape[:-1], heading.shape)
    pts = np.zeros(lead + (21, 2))
    pts[..., 0, :] = wrist

    def ang(name):
        return np.broadcast_to(np.asarray(angles.get(name, 0.0), dtype=float), lead)

    base = 1
    cmc = wrist + scale * _THUMB_LEN[0] * _unit(np.radians(heading + sign * _THUMB_BASE))
    pts[..., 1, :] = cmc
    d = heading + sign * (_THUMB_BASE + ang("thumb_cmc"))
    p = cmc
    for k, (name, length) in enumerate(zip(("thumb_mcp", "thumb_ip", None), _THUMB_LEN[1:])):
        p = p + scale * length * _unit(np.radians(d))
        pts[..., base + 1 + k, :] = p
        if name is not None:
            d = d + sign * ang(name)

    for f_i, finger in enumerate(FINGERS):
        first = 5 + 4 * f_i
        ray = heading + sign * _RAYS[finger]
        mcp = wrist + scale * _PALM[finger] * _unit(np.radians(ray))
        pts[..., first, :] = mcp
        d = ray + sign * ang(f"{finger}_mcp")
        p = mcp
        joints = (f"{finger}_pip", f"{finger}_dip", None)
        for k, (name, length) in enumerate(zip(joints, _PHALANX)):
            p = p + scale * length * _unit(np.radians(d))
            pts[..., first + 1 + k, :] = p
            if name is not None:
                d = d + sign * ang(name)
    return pts


# FE ranges kept clear of the table limits (thumb CMC/MCP also bound the AA angles)
SAFE_RANGES = {
    "thumb_cmc": (-10.0, 8.0),
    "thumb_mcp": (1.0, 6.0),
    "thumb_ip": (-20.0, 80.0),
    **{f"{f}_mcp": (-12.0, 12.0) for f in FINGERS},
    **{f"{f}_pip": (5.0, 120.0) for f in FINGERS},
    **{f"{f}_dip": (-20.0, 80.0) for f in FINGERS},
}


def legal_hand_angles(rng: np.random.Generator, shape=()) -> dict:
    """Random FE angles drawn from :data:`SAFE_RANGES`."""
    return {k: rng.uniform(lo, hi, shape) for k, (lo, hi) in SAFE_RANGES.items()}


def random_hand_poses(n: int, seed: int, perturb_deg: float = 60.0,
                      sign: float = 1.0) -> np.ndarray:
    """``n`` hands whose legal angles are perturbed by up to +/- ``perturb_deg``.

    Most of these violate at least one joint range.
    """
    rng = np.random.default_rng(seed)
    angles = legal_hand_angles(rng, (n,))
    angles = {k: v + rng.uniform(-perturb_deg, perturb_deg, n) for k, v in angles.items()}
    wrist = rng.uniform(0.3, 0.7, (n, 2))
    heading = rng.uniform(-180.0, 180.0, n)
    scale = rng.uniform(0.04, 0.1, (n, 1, 1))
    pts = hand_pose(wrist, heading, 1.0, angles, sign)
    return wrist[:, None, :] + scale * (pts - wrist[:, None, :])


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 5
    per_class: int = 40
    frames: int = 30
    noise: float = 0.01
    seed: int = 0
    violation_rate: float = 0.0
    min_frames: int | None = None

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.frames < 4:
            raise ValueError("need at least 4 frames")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.noise < 0 or not 0.0 <= self.violation_rate <= 1.0:
            raise ValueError("noise must be >= 0 and violation_rate in [0, 1]")
        if self.min_frames is not None and not 1 <= self.min_frames <= self.frames:
            raise ValueError("min_frames must lie in [1, frames]")


def _class_params(rng: np.random.Generator) -> dict:
    arms = {}
    for side in ("right", "left"):
        arms[side] = dict(
            shoulder=rng.uniform(60.0, 115.0),
            shoulder_amp=rng.uniform(5.0, 25.0),
            elbow=rng.uniform(-150.0, -70.0),
            elbow_amp=rng.uniform(5.0, 35.0),
            freq=rng.uniform(0.5, 2.5),
            phase=rng.uniform(0.0, 2 * np.pi),
            wrist=rng.uniform(-30.0, 30.0),
            fingers=legal_hand_angles(rng),
            finger_amp=rng.uniform(0.0, 8.0),
        )
    return arms


_SHOULDERS = {"right": np.array([0.40, 0.55]), "left": np.array([0.60, 0.55])}
_HEAD = {
    "nose": (0.50, 0.42), "neck": (0.50, 0.55),
    "right_eye": (0.48, 0.40), "left_eye": (0.52, 0.40),
    "right_ear": (0.46, 0.41), "left_ear": (0.54, 0.41),
}


def _mirror_deg(a):
    return 180.0 - a


def _violate(rng, angles: dict, rate: float, n: int) -> dict:
    """Push PIP/DIP/thumb-IP angles outside their ranges at ``rate``."""
    out = {k: np.array(v, dtype=float) for k, v in angles.items()}
    targets = [(f"{f}_pip", -40.0, -15.0) for f in FINGERS]
    targets += [(f"{f}_dip", -60.0, -40.0) for f in FINGERS]
    targets += [("thumb_ip", 100.0, 130.0)]
    for name, lo, hi in targets:
        hit = rng.random(n) < rate
        out[name] = np.where(hit, rng.uniform(lo, hi, n), out[name])
    return out


def _sample(spec: SyntheticSpec, params: dict, rng: np.random.Generator, label: int):
    T = spec.frames
    valid = T if spec.min_frames is None else int(rng.integers(spec.min_frames, T + 1))
    t = np.arange(valid) / T
    coords = np.zeros((valid, NUM_KEYPOINTS, 2))
    shift = rng.uniform(-0.01, 0.01, 2)
    for name, xy in _HEAD.items():
        coords[:, LAYOUT.body_index(name)] = np.asarray(xy) + shift
    for side in ("right", "left"):
        p = params[side]
        jitter = rng.uniform(-0.15, 0.15)
        amp = rng.uniform(0.95, 1.05)
        wave = np.sin(2 * np.pi * p["freq"] * t + p["phase"] + jitter) * amp
        a_sh = p["shoulder"] + p["shoulder_amp"] * wave
        a_el = a_sh + p["elbow"] + p["elbow_amp"] * wave
        if side == "left":
            a_sh, a_el = _mirror_deg(a_sh), _mirror_deg(a_el)
        shoulder = _SHOULDERS[side] + shift
        elbow = shoulder + 0.16 * _unit(np.radians(a_sh))
        wrist = elbow + 0.14 * _unit(np.radians(a_el))
        coords[:, LAYOUT.body_index(f"{side}_shoulder")] = shoulder
        coords[:, LAYOUT.body_index(f"{side}_elbow")] = elbow
        coords[:, LAYOUT.body_index(f"{side}_wrist")] = wrist

        sign = 1.0 if side == "right" else -1.0
        heading = a_el + sign * p["wrist"]
        fingers = {k: np.clip(v + p["finger_amp"] * wave, *SAFE_RANGES[k])
                   for k, v in p["fingers"].items()}
        if spec.violation_rate > 0:
            fingers = _violate(rng, fingers, spec.violation_rate, valid)
        hand = hand_pose(wrist, heading, 0.06, fingers, sign)
        lo = LAYOUT.range(f"{side}_hand")[0]
        coords[:, lo:lo + 21] = hand
    if spec.noise > 0:
        coords = coords + rng.normal(0.0, spec.noise, coords.shape)
    return SkeletalSequence(coords, label, valid)


def generate_synthetic_dataset(spec: SyntheticSpec) -> LabeledDataset:
    """Deterministic under ``spec.seed``; sequences are unpadded when ``min_frames`` is set."""
    rng = np.random.default_rng(spec.seed)
    class_params = [_class_params(rng) for _ in range(spec.classes)]
    seqs = []
    for c in range(spec.classes):
        for _ in range(spec.per_class):
            seqs.append(_sample(spec, class_params[c], rng, c))
    return LabeledDataset(tuple(seqs), spec.classes)


def split_synthetic(spec: SyntheticSpec, test_per_class: int):
    """Train/test sets drawn from the same class motions (test uses fresh noise)."""
    full = generate_synthetic_dataset(
        SyntheticSpec(spec.classes, spec.per_class + test_per_class, spec.frames, spec.noise,
                      spec.seed, spec.violation_rate, spec.min_frames))
    n = spec.per_class + test_per_class
    train_idx = [c * n + i for c in range(spec.classes) for i in range(spec.per_class)]
    test_idx = [c * n + i for c in range(spec.classes) for i in range(spec.per_class, n)]
    return full.subset(train_idx), full.subset(test_idx)
