"""Kinematic hand-pose rectification.

Joint angles are planar and measured between bone vectors, so they do not
depend on where the hand sits in the image:

* flexion/extension (FE) at a joint is the signed angle from the incoming
  bone (parent -> joint) to the outgoing bone (joint -> child); 0 means
  the finger is straight there.
* abduction/adduction (AA) at an MCP/CMC joint is the signed angle from a
  palm ray to the outgoing bone. The palm ray is wrist -> that finger's
  MCP, except for the thumb CMC, which uses wrist -> index MCP.

The left hand is the mirror image of the right, so its angles are
measured with the sign flipped. A violated joint is fixed by rigidly
rotating everything distal to it about the joint, which keeps every bone
length intact.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .skeleton import HAND_JOINT_NAMES, LAYOUT, SkeletalSequence

AA = "AA"
FE = "FE"
MOTIONS = (AA, FE)
HANDS = ("left_hand", "right_hand")
FINGERS = ("index", "middle", "ring", "little")

# (motion, Table 1 row) -> (min deg, max deg)
TABLE_1 = {
    (AA, "thumb_cmc"): (0.0, 45.0),
    (AA, "thumb_mcp"): (-7.0, 12.0),
    (AA, "finger_mcp"): (-15.0, 15.0),
    (FE, "thumb_cmc"): (-20.0, 45.0),
    (FE, "thumb_mcp"): (0.0, 80.0),
    (FE, "thumb_ip"): (-30.0, 90.0),
    (FE, "finger_mcp"): (-40.0, 90.0),
    (FE, "finger_pip"): (0.0, 130.0),
    (FE, "finger_dip"): (-30.0, 90.0),
}


class DegenerateBoneError(ValueError):
    pass


def _table_row(joint: str) -> str:
    finger, kind = joint.split("_")
    return joint if finger == "thumb" else f"finger_{kind}"


@dataclass(frozen=True)
class JointSpec:
    name: str
    index: int
    parent: int
    child: int
    motions: tuple[str, ...]
    aa_ref: tuple[int, int] | None  # (from, to) of the palm ray
    distal: tuple[int, ...]  # child and everything below it


@dataclass(frozen=True)
class HandTopology:
    parent: tuple[int, ...]
    joints: tuple[JointSpec, ...]

    def joint(self, name: str) -> JointSpec:
        for j in self.joints:
            if j.name == name:
                return j
        raise KeyError(f"unknown joint {name!r}")

    @property
    def bones(self) -> list[tuple[int, int]]:
        return [(p, c) for c, p in enumerate(self.parent) if p >= 0]


def _build_topology() -> HandTopology:
    idx = {n: i for i, n in enumerate(HAND_JOINT_NAMES)}
    parent = [-1] * len(HAND_JOINT_NAMES)
    chains = {"thumb": ["thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip"]}
    for f in FINGERS:
        chains[f] = [f"{f}_mcp", f"{f}_pip", f"{f}_dip", f"{f}_tip"]
    for chain in chains.values():
        prev = 0
        for n in chain:
            parent[idx[n]] = prev
            prev = idx[n]

    joints = []
    for finger, chain in chains.items():
        for pos, name in enumerate(chain[:-1]):
            i = idx[name]
            kind = name.split("_")[1]
            aa_ref = None
            if finger == "thumb" and kind == "cmc":
                aa_ref = (0, idx["index_mcp"])
            elif kind in ("mcp", "cmc"):
                aa_ref = (0, i)
            motions = (AA, FE) if aa_ref is not None else (FE,)
            distal = tuple(idx[n] for n in chain[pos + 1:])
            joints.append(JointSpec(name, i, parent[i], idx[chain[pos + 1]], motions,
                                    aa_ref, distal))
    # root-to-tip: order by depth so proximal fixes happen first
    depth = {}
    for j in joints:
        d, p = 0, j.index
        while parent[p] >= 0:
            d, p = d + 1, parent[p]
        depth[j.name] = d
    joints.sort(key=lambda j: (depth[j.name], j.index))
    return HandTopology(tuple(parent), tuple(joints))


HAND_TOPOLOGY = _build_topology()


@dataclass(frozen=True)
class ConstraintTable:
    """(joint name, motion) -> (min, max) in degrees."""

    entries: dict

    def __post_init__(self):
        for key, (lo, hi) in self.entries.items():
            if lo > hi:
                raise ValueError(f"{key}: min {lo} > max {hi}")

    @classmethod
    def default(cls) -> ConstraintTable:
        entries = {}
        for j in HAND_TOPOLOGY.joints:
            for m in j.motions:
                entries[(j.name, m)] = TABLE_1[(m, _table_row(j.name))]
        return cls(entries)

    def bounds(self, joint: str, motion: str) -> tuple[float, float]:
        try:
            return self.entries[(joint, motion)]
        except KeyError:
            raise KeyError(f"no constraint for {joint} {motion}") from None


DEFAULT_TABLE = ConstraintTable.default()


@dataclass(frozen=True)
class RectifyConfig:
    alpha: float = 0.4
    motions: tuple[str, ...] = (AA, FE)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        motions = tuple(m.upper() for m in self.motions)
        bad = set(motions) - set(MOTIONS)
        if bad:
            raise ValueError(f"unknown motions {sorted(bad)}")
        object.__setattr__(self, "motions", motions)


def chirality(hand: str) -> float:
    if hand not in HANDS:
        raise ValueError(f"hand must be one of {HANDS}")
    return -1.0 if hand == "left_hand" else 1.0


def _reference_and_bone(pts: np.ndarray, j: JointSpec, motion: str):
    """Return (reference vector, offending bone) arrays of shape (..., 2)."""
    bone = pts[..., j.child, :] - pts[..., j.index, :]
    if motion == FE:
        ref = pts[..., j.index, :] - pts[..., j.parent, :]
    elif motion == AA:
        if j.aa_ref is None:
            raise ValueError(f"AA is not defined at {j.name}")
        a, b = j.aa_ref
        ref = pts[..., b, :] - pts[..., a, :]
    else:
        raise ValueError(f"unknown motion {motion!r}")
    return ref, bone


def signed_angle_deg(ref: np.ndarray, vec: np.ndarray) -> np.ndarray:
    cross = ref[..., 0] * vec[..., 1] - ref[..., 1] * vec[..., 0]
    dot = (ref * vec).sum(axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def hand_angles(pts: np.ndarray, joint: str, motion: str, sign: float = 1.0,
                topo: HandTopology = HAND_TOPOLOGY):
    """Angles of ``joint`` for a stack of hands ``pts`` (..., 21, 2).

    Returns ``(theta, ok)`` where ``ok`` flags hands whose two vectors are
    non-degenerate and whose involved keypoints are not missing.
    """
    j = topo.joint(joint)
    ref, bone = _reference_and_bone(pts, j, motion)
    used = {j.index, j.child, j.parent} if motion == FE else {j.index, j.child, *j.aa_ref}
    present = np.all(np.any(pts[..., sorted(used), :] != 0, axis=-1), axis=-1)
    ok = (np.linalg.norm(ref, axis=-1) > 1e-12) & (np.linalg.norm(bone, axis=-1) > 1e-12)
    return sign * signed_angle_deg(ref, bone), ok & present


def joint_angle(joint: str, frame: np.ndarray, motion: str, hand: str = "right_hand",
                topo: HandTopology = HAND_TOPOLOGY) -> float:
    """Signed angle in degrees of ``joint`` in one 54 x 2 frame."""
    j = topo.joint(joint)
    if motion not in j.motions:
        raise ValueError(f"{motion} is not defined at {joint}")
    lo = LAYOUT.range(hand)[0]
    pts = np.asarray(frame, dtype=float)[lo:lo + 21]
    ref, bone = _reference_and_bone(pts, j, motion)
    if np.linalg.norm(ref) <= 1e-12 or np.linalg.norm(bone) <= 1e-12:
        raise DegenerateBoneError(f"zero-length bone at {joint} ({motion})")
    return float(chirality(hand) * signed_angle_deg(ref, bone))


def angle_error(theta, joint: str, motion: str, table: ConstraintTable = DEFAULT_TABLE):
    """Violation magnitude in degrees (0 inside the allowed range)."""
    lo, hi = table.bounds(joint, motion)
    theta = np.asarray(theta, dtype=float)
    err = np.where(theta > hi, theta - hi, np.where(theta < lo, lo - theta, 0.0))
    return float(err) if err.ndim == 0 else err


def _rotate_about(pts: np.ndarray, centre: np.ndarray, deg: np.ndarray) -> np.ndarray:
    rad = np.radians(deg)[..., None]
    c, s = np.cos(rad), np.sin(rad)
    d = pts - centre[..., None, :]
    x, y = d[..., 0], d[..., 1]
    return centre[..., None, :] + np.stack([c * x - s * y, s * x + c * y], axis=-1)


def rotate_distal(pts: np.ndarray, joint: str, deg, topo: HandTopology = HAND_TOPOLOGY):
    """Rotate the joint's distal chain counter-clockwise by ``deg`` (per hand)."""
    j = topo.joint(joint)
    out = np.array(pts, dtype=float)
    deg = np.broadcast_to(np.asarray(deg, dtype=float), out.shape[:-2])
    distal = list(j.distal)
    moving = deg != 0
    if not np.any(moving):
        return out
    chain = out[..., distal, :]
    turned = _rotate_about(chain, out[..., j.index, :], deg)
    # missing keypoints stay at the (0, 0) marker; unrotated hands stay bit-identical
    keep = ~moving[..., None, None] | np.all(chain == 0, axis=-1, keepdims=True)
    out[..., distal, :] = np.where(keep, chain, turned)
    return out


def rectify_joint(joint: str, frame: np.ndarray, eps: float, alpha: float, direction: int,
                  hand: str = "right_hand", topo: HandTopology = HAND_TOPOLOGY) -> np.ndarray:
    """Rotate the distal chain of ``joint`` by ``alpha * eps`` degrees.

    ``direction`` is +1 to increase the measured angle and -1 to decrease
    it; the left-hand mirror is handled here.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    frame = np.array(frame, dtype=float)
    if eps == 0 or alpha == 0:
        return frame
    lo = LAYOUT.range(hand)[0]
    deg = chirality(hand) * np.sign(direction) * alpha * eps
    frame[lo:lo + 21] = rotate_distal(frame[lo:lo + 21], joint, deg, topo)
    return frame


@dataclass
class RectifyReport:
    violations: dict = field(default_factory=lambda: defaultdict(int))
    eps_before: dict = field(default_factory=lambda: defaultdict(float))
    eps_after: dict = field(default_factory=lambda: defaultdict(float))
    measured: dict = field(default_factory=lambda: defaultdict(int))
    skipped: int = 0

    def to_dict(self) -> dict:
        rows = []
        for key in sorted(self.measured):
            n = self.measured[key]
            rows.append({
                "joint": key[0],
                "motion": key[1],
                "measured": n,
                "violations": self.violations[key],
                "mean_eps_before": self.eps_before[key] / n if n else 0.0,
                "mean_eps_after": self.eps_after[key] / n if n else 0.0,
            })
        return {"joints": rows, "skipped": self.skipped}


def rectify_hands(pts: np.ndarray, cfg: RectifyConfig, sign: float,
                  table: ConstraintTable = DEFAULT_TABLE, topo: HandTopology = HAND_TOPOLOGY,
                  report: RectifyReport | None = None) -> np.ndarray:
    """Single root-to-tip rectification pass over a stack of hands (F, 21, 2)."""
    out = np.array(pts, dtype=float)
    if cfg.alpha == 0 or out.shape[0] == 0:
        return out
    for j in topo.joints:
        for motion in MOTIONS:
            if motion not in cfg.motions or motion not in j.motions:
                continue
            theta, ok = hand_angles(out, j.name, motion, sign, topo)
            eps = np.where(ok, angle_error(np.where(ok, theta, 0.0), j.name, motion, table), 0.0)
            lo, hi = table.bounds(j.name, motion)
            step = np.where(theta > hi, -1.0, 1.0) * cfg.alpha * eps
            out = rotate_distal(out, j.name, sign * step, topo)
            if report is not None:
                key = (j.name, motion)
                report.measured[key] += int(ok.sum())
                report.violations[key] += int((eps > 0).sum())
                report.eps_before[key] += float(eps.sum())
                report.skipped += int((~ok).sum())
    return out


def audit_hands(pts: np.ndarray, sign: float, motions=MOTIONS,
                table: ConstraintTable = DEFAULT_TABLE, topo: HandTopology = HAND_TOPOLOGY):
    """Violation magnitudes for every measurable (joint, motion): {key: eps array}."""
    result = {}
    for j in topo.joints:
        for motion in j.motions:
            if motion not in motions:
                continue
            theta, ok = hand_angles(pts, j.name, motion, sign, topo)
            result[(j.name, motion)] = angle_error(theta[ok], j.name, motion, table)
    return result


def _hand_present(block: np.ndarray) -> np.ndarray:
    return np.any(block != 0, axis=(-1, -2))


def rectify_sequence(seq: SkeletalSequence, cfg: RectifyConfig,
                     table: ConstraintTable = DEFAULT_TABLE,
                     topo: HandTopology = HAND_TOPOLOGY,
                     report: RectifyReport | None = None) -> SkeletalSequence:
    """Rectify both hands in every valid frame; body and padding untouched."""
    if cfg.alpha == 0:
        return seq
    coords = seq.coords.copy()
    valid = seq.valid_frames
    for hand in HANDS:
        lo = LAYOUT.range(hand)[0]
        block = coords[:valid, lo:lo + 21]
        live = _hand_present(block)
        if not live.any():
            continue
        sign = chirality(hand)
        fixed = rectify_hands(block[live], cfg, sign, table, topo, report)
        if report is not None:
            for key, eps in audit_hands(fixed, sign, cfg.motions, table, topo).items():
                report.eps_after[key] += float(eps.sum())
        block[live] = fixed
        coords[:valid, lo:lo + 21] = block
    return replace(seq, coords=coords)


def bone_lengths(pts: np.ndarray, topo: HandTopology = HAND_TOPOLOGY) -> np.ndarray:
    """Lengths of the 20 bones for hands (..., 21, 2)."""
    return np.stack([np.linalg.norm(pts[..., c, :] - pts[..., p, :], axis=-1)
                     for p, c in topo.bones], axis=-1)
