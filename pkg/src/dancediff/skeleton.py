"""Kinematic tree, 6D rotations, forward kinematics and foot-contact labels.

Coordinates are z-up, meters. A 6D rotation holds the first two columns of
the rotation matrix; ``rot6d_to_matrix`` rebuilds the matrix by Gram-Schmidt.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

UP_AXIS = 2


class DegenerateRotationError(ValueError):
    pass


class InsufficientFramesError(ValueError):
    pass


class MotionValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]  # -1 marks the root
    offsets: np.ndarray  # (J, 3) rest bone vector from parent
    foot_joints: tuple[int, int, int, int]  # l_heel, r_heel, l_toe, r_toe
    lower_body: frozenset[int]
    order: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        J = len(self.joint_names)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.shape != (J, 3) or len(self.parents) != J:
            raise ValueError(f"skeleton arrays disagree on joint count {J}")
        if len(set(self.joint_names)) != J:
            raise ValueError("joint names must be unique")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "parents", tuple(-1 if p is None else int(p) for p in self.parents))
        object.__setattr__(self, "foot_joints", tuple(int(k) for k in self.foot_joints))
        object.__setattr__(self, "lower_body", frozenset(int(k) for k in self.lower_body))

        roots = [j for j, p in enumerate(self.parents) if p == -1]
        if len(roots) != 1:
            raise ValueError(f"skeleton needs exactly one root, found {len(roots)}")
        children: dict[int, list[int]] = {j: [] for j in range(J)}
        for j, p in enumerate(self.parents):
            if p != -1:
                if not 0 <= p < J:
                    raise ValueError(f"joint {j} has out-of-range parent {p}")
                children[p].append(j)
        order, stack = [], [roots[0]]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(children[j]))
        if len(order) != J:
            raise ValueError("parents do not form a single tree (cycle or detached joints)")
        object.__setattr__(self, "order", tuple(order))

        if len(self.foot_joints) != 4:
            raise ValueError("foot_joints must list 4 joints")
        if self.root not in self.lower_body:
            raise ValueError("root must belong to the lower body")
        if not self.lower_body <= set(range(J)):
            raise ValueError("lower_body references unknown joints")
        if not set(self.foot_joints) <= self.lower_body:
            raise ValueError("foot joints must belong to the lower body")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    @property
    def upper_body(self) -> frozenset[int]:
        return frozenset(range(self.n_joints)) - self.lower_body

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j in self.order:
            p = self.parents[j]
            if p != -1:
                pos[j] = pos[p] + self.offsets[j]
        return pos

    def rest_height(self) -> float:
        """Root height above the lowest joint in the rest pose."""
        pos = self.rest_positions()
        return float(pos[self.root, UP_AXIS] - pos[:, UP_AXIS].min())

    def to_dict(self) -> dict:
        return {
            "names": list(self.joint_names),
            "parents": [None if p == -1 else p for p in self.parents],
            "offsets": self.offsets.tolist(),
            "foot_joints": list(self.foot_joints),
            "lower_body": sorted(self.lower_body),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(
            joint_names=tuple(d["names"]),
            parents=tuple(d["parents"]),
            offsets=np.asarray(d["offsets"], dtype=np.float64),
            foot_joints=tuple(d["foot_joints"]),
            lower_body=frozenset(d["lower_body"]),
        )

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash((self.joint_names, self.parents, self.foot_joints))


def desk_skeleton() -> Skeleton:
    """Nine-joint dancer: pelvis, spine, head and two straight legs with heel and toe.

    Heel joints double as ankles; the hip rotation swings the whole leg.
    """
    names = ("pelvis", "spine", "head",
             "l_hip", "l_heel", "l_toe",
             "r_hip", "r_heel", "r_toe")
    parents = (-1, 0, 1, 0, 3, 4, 0, 6, 7)
    offsets = np.array([
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.25],
        [0.0, 0.0, 0.35],
        [0.10, 0.0, 0.0],
        [0.0, 0.0, -0.85],
        [0.0, 0.14, -0.05],
        [-0.10, 0.0, 0.0],
        [0.0, 0.0, -0.85],
        [0.0, 0.14, -0.05],
    ])
    return Skeleton(names, parents, offsets, (4, 7, 5, 8), frozenset({0, 3, 4, 5, 6, 7, 8}))


def smpl_like_skeleton() -> Skeleton:
    """24-joint tree with the SMPL topology and approximate adult offsets."""
    names = ("pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
             "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
             "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand")
    parents = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
    offsets = np.array([
        [0.0, 0.0, 0.0], [0.06, 0.0, -0.09], [-0.06, 0.0, -0.09], [0.0, 0.0, 0.11],
        [0.04, 0.0, -0.38], [-0.04, 0.0, -0.38], [0.0, 0.0, 0.14], [0.0, 0.0, -0.40],
        [0.0, 0.0, -0.40], [0.0, 0.0, 0.05], [0.0, 0.12, -0.06], [0.0, 0.12, -0.06],
        [0.0, 0.0, 0.21], [0.08, 0.0, 0.11], [-0.08, 0.0, 0.11], [0.0, 0.0, 0.09],
        [0.12, 0.0, 0.0], [-0.12, 0.0, 0.0], [0.26, 0.0, 0.0], [-0.26, 0.0, 0.0],
        [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0], [0.08, 0.0, 0.0], [-0.08, 0.0, 0.0],
    ])
    lower = frozenset({0, 1, 2, 4, 5, 7, 8, 10, 11})
    return Skeleton(names, parents, offsets, (7, 8, 10, 11), lower)


@dataclass
class MotionSequence:
    fps: float
    root_translation: np.ndarray  # (F, 3)
    rotations: np.ndarray  # (F, J, 6)
    contacts: np.ndarray  # (F, 4)

    def __post_init__(self):
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.contacts = np.asarray(self.contacts, dtype=np.float64)
        F = self.root_translation.shape[0]
        if F < 1:
            raise MotionValidationError("motion needs at least one frame")
        if self.root_translation.shape != (F, 3):
            raise MotionValidationError(f"root_translation must be (F, 3), got {self.root_translation.shape}")
        if self.rotations.ndim != 3 or self.rotations.shape[0] != F or self.rotations.shape[2] != 6:
            raise MotionValidationError(f"rotations must be (F, J, 6), got {self.rotations.shape}")
        if self.contacts.shape != (F, 4):
            raise MotionValidationError(f"contacts must be (F, 4), got {self.contacts.shape}")
        for name in ("root_translation", "rotations", "contacts"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise MotionValidationError(f"{name} contains non-finite values")
        if not np.all((self.contacts == 0) | (self.contacts == 1)):
            raise MotionValidationError("contacts must be 0 or 1")

    @property
    def n_frames(self) -> int:
        return self.root_translation.shape[0]

    @property
    def n_joints(self) -> int:
        return self.rotations.shape[1]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def features(self) -> np.ndarray:
        """Flatten to the (F, 3 + 6J + 4) denoiser layout."""
        F = self.n_frames
        return np.concatenate([self.root_translation, self.rotations.reshape(F, -1), self.contacts], axis=1)

    @classmethod
    def from_features(cls, x: np.ndarray, fps: float, n_joints: int) -> "MotionSequence":
        """Inverse of ``features``; contact channels are thresholded at 0.5."""
        x = np.asarray(x, dtype=np.float64)
        F = x.shape[0]
        if x.shape[1] != feature_width(n_joints):
            raise MotionValidationError(f"feature width {x.shape[1]} does not match {n_joints} joints")
        return cls(
            fps=fps,
            root_translation=x[:, :3].copy(),
            rotations=x[:, 3:3 + 6 * n_joints].reshape(F, n_joints, 6).copy(),
            contacts=(x[:, 3 + 6 * n_joints:] >= 0.5).astype(np.float64),
        )

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.fps, self.root_translation[start:stop].copy(),
                              self.rotations[start:stop].copy(), self.contacts[start:stop].copy())

    def check_rotations(self) -> None:
        rot6d_to_matrix(self.rotations.reshape(-1, 6))

    def to_dict(self, skel: Skeleton) -> dict:
        return {
            "fps": float(self.fps),
            "skeleton": skel.to_dict(),
            "root_translation": self.root_translation.tolist(),
            "rotations_6d": self.rotations.tolist(),
            "contacts": self.contacts.tolist(),
        }


def feature_width(n_joints: int) -> int:
    return 3 + 6 * n_joints + 4


def rot6d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt a 6-vector (or a stack of them) into rotation matrices.

    Raises DegenerateRotationError for a zero first column or parallel columns.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[..., :3], r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if not np.all(np.isfinite(r6)) or np.any(n1 < 1e-12):
        raise DegenerateRotationError("first rotation column is zero or non-finite")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-9 * np.maximum(np.linalg.norm(a2, axis=-1, keepdims=True), 1e-300)) or np.any(n2 == 0):
        raise DegenerateRotationError("rotation columns are parallel or the second is zero")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_to_matrix(axis_angle) -> np.ndarray:
    """Rodrigues formula over the trailing axis."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    k = np.where(theta > 0, aa / np.where(theta > 0, theta, 1.0), 0.0)
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s, c = np.sin(theta)[..., None], np.cos(theta)[..., None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def rot6d_to_matrix_torch(r6: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Differentiable Gram-Schmidt for network outputs; norms are clamped, never raises."""
    a1, a2 = r6[..., :3], r6[..., 3:6]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(eps)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / u2.norm(dim=-1, keepdim=True).clamp_min(eps)
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def fk_torch(root: torch.Tensor, rot6d: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    """Joint positions (..., J, 3) from root (..., 3) and 6D rotations (..., J, 6)."""
    J = skel.n_joints
    if rot6d.shape[-2] != J:
        raise ValueError(f"motion has {rot6d.shape[-2]} joints, skeleton has {J}")
    local = rot6d_to_matrix_torch(rot6d)
    offsets = torch.as_tensor(skel.offsets, dtype=root.dtype)
    glob: list = [None] * J
    pos: list = [None] * J
    for j in skel.order:
        p = skel.parents[j]
        if p == -1:
            glob[j] = local[..., j, :, :]
            pos[j] = torch.zeros_like(root)
        else:
            glob[j] = glob[p] @ local[..., j, :, :]
            pos[j] = pos[p] + (glob[p] @ offsets[j].unsqueeze(-1)).squeeze(-1)
    # root added once so a shift of a root at the origin moves every joint exactly
    return torch.stack(pos, dim=-2) + root.unsqueeze(-2)


def forward_kinematics(skel: Skeleton, motion: MotionSequence) -> np.ndarray:
    """(F, J, 3) joint positions in meters."""
    if motion.n_joints != skel.n_joints:
        raise ValueError(f"motion has {motion.n_joints} joints, skeleton has {skel.n_joints}")
    motion.check_rotations()
    with torch.no_grad():
        pos = fk_torch(torch.from_numpy(motion.root_translation),
                       torch.from_numpy(motion.rotations), skel)
    return pos.numpy()


def extract_foot_contacts(positions, skel: Skeleton, fps: float,
                          speed_threshold: float = 0.15, height_threshold: float = 0.08) -> np.ndarray:
    """Binary (F, 4) contacts: a foot joint is planted when slow and near the floor.

    Speed at frame i is the forward difference to frame i+1; the last frame
    copies the one before it.
    """
    positions = np.asarray(positions, dtype=np.float64)
    F = positions.shape[0]
    if F < 2:
        raise InsufficientFramesError("contact extraction needs at least 2 frames")
    feet = positions[:, list(skel.foot_joints), :]
    speed = np.linalg.norm(feet[1:] - feet[:-1], axis=-1) * fps
    height = feet[:-1, :, UP_AXIS]
    c = ((speed < speed_threshold) & (height < height_threshold)).astype(np.float64)
    return np.concatenate([c, c[-1:]], axis=0)

