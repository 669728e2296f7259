"""Skeletal sequences, the keypoint layout, dataset I/O and padding.

A frame holds 54 image-space keypoints ``(x, y)``: 21 for the left hand,
21 for the right hand, then 12 upper-body points. Padded frames and
missing keypoints are both stored as exact zeros.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

NUM_KEYPOINTS = 54
HAND_SIZE = 21
BODY_SIZE = 12

PARTS = ("left_hand", "right_hand", "body")

# wrist, then each finger proximal -> tip
HAND_JOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "little_mcp", "little_pip", "little_dip", "little_tip",
)

BODY_NAMES = (
    "nose", "neck",
    "right_eye", "left_eye",
    "right_ear", "left_ear",
    "right_shoulder", "left_shoulder",
    "right_elbow", "left_elbow",
    "right_wrist", "left_wrist",
)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PartLayout:
    left_hand: tuple[int, int] = (0, 21)
    right_hand: tuple[int, int] = (21, 42)
    body: tuple[int, int] = (42, 54)

    def range(self, part: str) -> tuple[int, int]:
        if part not in PARTS:
            raise ValueError(f"unknown part {part!r}; expected one of {PARTS}")
        return getattr(self, part)

    def size(self, part: str) -> int:
        lo, hi = self.range(part)
        return hi - lo

    def body_index(self, name: str) -> int:
        return self.body[0] + BODY_NAMES.index(name)

    def hand_index(self, part: str, joint: str) -> int:
        return self.range(part)[0] + HAND_JOINT_NAMES.index(joint)


LAYOUT = PartLayout()


@dataclass(frozen=True)
class SkeletalSequence:
    """``coords`` has shape (T, 54, 2); frames at index >= valid_frames are zero."""

    coords: np.ndarray
    label: int | None = None
    valid_frames: int | None = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[1:] != (NUM_KEYPOINTS, 2):
            raise SchemaError(f"coords must be (T, {NUM_KEYPOINTS}, 2), got {coords.shape}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        valid = coords.shape[0] if self.valid_frames is None else int(self.valid_frames)
        if not 0 <= valid <= coords.shape[0]:
            raise SchemaError(f"valid_frames={valid} outside [0, {coords.shape[0]}]")
        if np.any(coords[valid:] != 0):
            raise SchemaError("padded frames must be all zero")
        object.__setattr__(self, "valid_frames", valid)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def num_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def mask(self) -> np.ndarray:
        """Boolean frame-validity mask of length T."""
        return np.arange(self.num_frames) < self.valid_frames

    def with_coords(self, coords: np.ndarray) -> SkeletalSequence:
        return replace(self, coords=coords)

    def flat(self) -> np.ndarray:
        return self.coords.reshape(-1)


@dataclass(frozen=True)
class LabeledDataset:
    sequences: tuple[SkeletalSequence, ...]
    num_classes: int
    class_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        seqs = tuple(self.sequences)
        object.__setattr__(self, "sequences", seqs)
        if self.num_classes < 1:
            raise SchemaError("num_classes must be >= 1")
        counts = {c: 0 for c in range(self.num_classes)}
        for s in seqs:
            if s.label is None or not 0 <= s.label < self.num_classes:
                raise SchemaError(f"label {s.label} outside [0, {self.num_classes})")
            counts[s.label] += 1
        object.__setattr__(self, "class_counts", counts)

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i) -> SkeletalSequence:
        return self.sequences[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=int)

    @property
    def max_frames(self) -> int:
        return max(s.num_frames for s in self.sequences)

    def is_padded(self) -> bool:
        return len({s.num_frames for s in self.sequences}) <= 1

    def map(self, fn) -> LabeledDataset:
        return LabeledDataset(tuple(fn(s) for s in self.sequences), self.num_classes)

    def subset(self, indices: Iterable[int]) -> LabeledDataset:
        return LabeledDataset(tuple(self.sequences[i] for i in indices), self.num_classes)


# ---------------------------------------------------------------- file I/O


def dataset_to_dict(ds: LabeledDataset) -> dict:
    return {
        "num_classes": ds.num_classes,
        "sequences": [
            {"label": s.label, "valid_frames": s.valid_frames, "frames": s.coords.tolist()}
            for s in ds.sequences
        ],
    }


def dataset_from_dict(doc: dict) -> LabeledDataset:
    if not isinstance(doc, dict) or "num_classes" not in doc or "sequences" not in doc:
        raise SchemaError('top level must be {"num_classes": C, "sequences": [...]}')
    seqs = []
    for i, item in enumerate(doc["sequences"]):
        frames = item.get("frames")
        if not isinstance(frames, list):
            raise SchemaError(f"sequence {i}: 'frames' must be a list")
        for t, frame in enumerate(frames):
            if not isinstance(frame, list) or len(frame) != NUM_KEYPOINTS:
                n = len(frame) if isinstance(frame, list) else type(frame).__name__
                raise SchemaError(
                    f"sequence {i} frame {t}: expected {NUM_KEYPOINTS} keypoints, got {n}")
            for k, pt in enumerate(frame):
                if not isinstance(pt, list) or len(pt) != 2:
                    raise SchemaError(
                        f"sequence {i} frame {t} keypoint {k}: expected [x, y], got {pt!r}")
        coords = np.array(frames, dtype=np.float64).reshape(len(frames), NUM_KEYPOINTS, 2)
        try:
            seqs.append(SkeletalSequence(coords, item.get("label"), item.get("valid_frames")))
        except SchemaError as exc:
            raise SchemaError(f"sequence {i}: {exc}") from None
    return LabeledDataset(tuple(seqs), int(doc["num_classes"]))


def load_dataset(path: str | os.PathLike) -> LabeledDataset:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if text else ""
        raise SchemaError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line[:120]}") from None
    return dataset_from_dict(doc)


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_dataset(ds: LabeledDataset, path: str | os.PathLike) -> None:
    # repr-precision floats keep the round trip bit-exact
    write_atomic(path, json.dumps(dataset_to_dict(ds)))


# ---------------------------------------------------------------- transforms


def pad_to_max_frames(ds: LabeledDataset) -> LabeledDataset:
    if len(ds) == 0:
        raise ValueError("cannot pad an empty dataset")
    T = ds.max_frames

    def pad(s: SkeletalSequence) -> SkeletalSequence:
        if s.num_frames == T:
            return s
        out = np.zeros((T, NUM_KEYPOINTS, 2))
        out[: s.num_frames] = s.coords
        return replace(s, coords=out)

    return ds.map(pad)


def partition_parts(seq: SkeletalSequence, layout: PartLayout = LAYOUT):
    """Split into (left T x 42, right T x 42, body T x 24), x/y interleaved."""
    T = seq.num_frames
    return tuple(
        seq.coords[:, slice(*layout.range(p))].reshape(T, -1) for p in PARTS
    )


def merge_parts(left: np.ndarray, right: np.ndarray, body: np.ndarray) -> np.ndarray:
    """Inverse of :func:`partition_parts`; returns (T, 54, 2) coordinates."""
    T = left.shape[0]
    return np.concatenate([left, right, body], axis=1).reshape(T, NUM_KEYPOINTS, 2)


def remove_keypoints(seq: SkeletalSequence, part: str, k: int, rng_seed: int,
                     layout: PartLayout = LAYOUT) -> SkeletalSequence:
    """Zero ``k`` distinct keypoints of ``part`` in every frame."""
    lo, hi = layout.range(part)
    if not 0 <= k <= hi - lo:
        raise ValueError(f"k={k} out of range [0, {hi - lo}] for {part}")
    if k == 0:
        return seq
    rng = np.random.default_rng(rng_seed)
    chosen = lo + rng.choice(hi - lo, size=k, replace=False)
    out = seq.coords.copy()
    out[:, chosen] = 0.0
    return replace(seq, coords=out)
