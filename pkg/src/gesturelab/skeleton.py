"""Skeleton trees, direction-vector normalization and forward kinematics.

A pose is stored either as joint positions (T, J, 3), as unit direction
vectors (T, J-1, 3) that erase the speaker's bone lengths, or as real-length
direction vectors that keep them. Bone j-1 connects parent[j] -> j.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegeneratePoseError(ValueError):
    """A bone collapsed to zero length; normalization is undefined."""

    def __init__(self, frame: int, joint: int):
        super().__init__(f"zero-length bone at frame {frame}, joint {joint}")
        self.frame = frame
        self.joint = joint


@dataclass
class Skeleton:
    parents: np.ndarray          # (J,) int, parents[0] == -1, parents[j] < j
    bone_lengths: np.ndarray     # (J-1,) float, meters, bone j-1 = parents[j] -> j
    name: str = ""

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=np.float64)
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        if np.any(self.parents[1:] >= np.arange(1, len(self.parents))):
            raise ValueError("parents must form a tree with parent[j] < j")
        if len(self.bone_lengths) != len(self.parents) - 1:
            raise ValueError("need exactly J-1 bone lengths")
        if np.any(self.bone_lengths <= 0):
            raise ValueError("bone lengths must be strictly positive")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def feature_width(self) -> int:
        return 3 * (self.joint_count - 1)

    def scaled(self, factor: float, name: str = "") -> "Skeleton":
        return Skeleton(self.parents.copy(), self.bone_lengths * factor, name or self.name)


# Canonical upper-body trees used by the synthetic corpus. Indices:
# gesture mode (J=10): root, spine, neck, head, L/R shoulder-elbow-wrist.
GESTURE_PARENTS = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8])
GESTURE_BONE_LENGTHS = np.array(
    [0.25, 0.12, 0.14, 0.19, 0.28, 0.26, 0.19, 0.28, 0.26])


def _expressive_tree() -> tuple[np.ndarray, np.ndarray]:
    # 13 body joints + 15 finger joints per hand (5 fingers x 3 segments)
    parents = [-1, 0, 1, 2, 3, 2, 5, 6, 7, 2, 9, 10, 11]
    lengths = [0.22, 0.20, 0.10, 0.12,
               0.09, 0.17, 0.27, 0.25,
               0.09, 0.17, 0.27, 0.25]
    for wrist in (8, 12):
        for _finger in range(5):
            base = len(parents)
            parents += [wrist, base, base + 1]
            lengths += [0.09, 0.035, 0.025]
    return np.array(parents), np.array(lengths)


EXPRESSIVE_PARENTS, EXPRESSIVE_BONE_LENGTHS = _expressive_tree()


def base_skeleton(mode: str) -> Skeleton:
    if mode == "gesture":
        return Skeleton(GESTURE_PARENTS.copy(), GESTURE_BONE_LENGTHS.copy(), "gesture-base")
    if mode == "expressive":
        return Skeleton(EXPRESSIVE_PARENTS.copy(), EXPRESSIVE_BONE_LENGTHS.copy(), "expressive-base")
    raise ValueError(f"unknown skeleton mode {mode!r}")


def _bone_vectors(joints: np.ndarray, skel: Skeleton) -> np.ndarray:
    joints = np.asarray(joints)
    child = joints[:, 1:, :]
    parent = joints[:, skel.parents[1:], :]
    return child - parent


def to_real_length_vectors(joints: np.ndarray, skel: Skeleton) -> np.ndarray:
    """Per-bone parent->child vectors with true lengths, (T, J-1, 3)."""
    vecs = _bone_vectors(joints, skel)
    norms = np.linalg.norm(vecs, axis=-1)
    if np.any(norms == 0):
        t, j = np.argwhere(norms == 0)[0]
        raise DegeneratePoseError(int(t), int(j) + 1)
    return vecs


def to_unit_direction_vectors(joints: np.ndarray, skel: Skeleton) -> np.ndarray:
    """Normalized bone vectors; erases bone lengths (speaker identity)."""
    vecs = to_real_length_vectors(joints, skel)
    return vecs / np.linalg.norm(vecs, axis=-1, keepdims=True)


def reconstruct_joints(dirs: np.ndarray, root: np.ndarray, skel: Skeleton,
                       unit: bool = True) -> np.ndarray:
    """Forward kinematics down the parent tree.

    `dirs` is (T, J-1, 3); with unit=True the skeleton's bone lengths are
    applied, otherwise the vectors are used as-is (real-length input).
    """
    dirs = np.asarray(dirs)
    T = dirs.shape[0]
    J = skel.joint_count
    if dirs.shape[1] != J - 1:
        raise ValueError(f"expected {J - 1} bones, got {dirs.shape[1]}")
    vecs = dirs * skel.bone_lengths[None, :, None] if unit else dirs
    joints = np.zeros((T, J, 3), dtype=np.result_type(dirs.dtype, np.float64))
    joints[:, 0, :] = np.asarray(root).reshape(T, 3) if np.ndim(root) > 1 else root
    for j in range(1, J):
        joints[:, j, :] = joints[:, skel.parents[j], :] + vecs[:, j - 1, :]
    return joints


def bone_angle_change(dirs: np.ndarray) -> np.ndarray:
    """Mean absolute per-bone angle change between consecutive frames, (T,).

    The angle is measured between each bone's direction in frame t-1 and t;
    frame 0 is defined as zero change.
    """
    d = np.asarray(dirs, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    dots = np.clip(np.einsum("tjc,tjc->tj", d[1:], d[:-1]), -1.0, 1.0)
    angles = np.arccos(dots).mean(axis=1)
    return np.concatenate([[0.0], angles])
