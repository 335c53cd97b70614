"""22-joint kinematic tree, body partition, shape basis and forward kinematics.

World frame convention: ``x`` points to the body's left, ``y`` forward and
``z`` up. Joint order follows the standard SMPL body tree so that every
parent index is smaller than its child's.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import FileFormatError, UnknownConfig
from .rotmath import as_tensor, axis_angle_to_matrix

N_JOINTS = 22
N_BETAS = 16
N_PARTS = 5
SKELETON_FORMAT = "sparsebody-skeleton"
SKELETON_VERSION = 1

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

PELVIS, HEAD, LEFT_WRIST, RIGHT_WRIST = 0, 15, 20, 21
LEFT_ANKLE, RIGHT_ANKLE = 7, 8
ANCHORS = (HEAD, LEFT_WRIST, RIGHT_WRIST)

PART_NAMES = ("torso", "left_arm", "right_arm", "left_leg", "right_leg")
_PART_JOINTS = (
    (0, 3, 6, 9, 12, 15),
    (13, 16, 18, 20),
    (14, 17, 19, 21),
    (1, 4, 7, 10),
    (2, 5, 8, 11),
)

# bone vectors in the parent frame, meters; used when no data file is found
_FALLBACK_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.09, -0.01, -0.08),
    (-0.09, -0.01, -0.08),
    (0.0, -0.02, 0.11),
    (0.0, 0.0, -0.38),
    (0.0, 0.0, -0.38),
    (0.0, 0.01, 0.13),
    (0.0, -0.02, -0.40),
    (0.0, -0.02, -0.40),
    (0.0, 0.0, 0.05),
    (0.0, 0.12, -0.06),
    (0.0, 0.12, -0.06),
    (0.0, 0.0, 0.21),
    (0.07, -0.01, 0.12),
    (-0.07, -0.01, 0.12),
    (0.0, 0.04, 0.10),
    (0.12, 0.0, 0.02),
    (-0.12, 0.0, 0.02),
    (0.26, 0.0, 0.0),
    (-0.26, 0.0, 0.0),
    (0.25, 0.0, 0.0),
    (-0.25, 0.0, 0.0),
)

# joints whose incoming bone is scaled by each of the first four shape
# coefficients: leg length, spine length, arm length, shoulder/hip width
_SHAPE_GROUPS = (
    (4, 5, 7, 8),
    (3, 6, 9, 12, 15),
    (18, 19, 20, 21),
    (1, 2, 13, 14, 16, 17),
)
_SHAPE_SCALE = 0.05


@dataclass(frozen=True)
class SkeletonTopology:
    parent: tuple[int, ...]
    rest_offsets: np.ndarray  # (22, 3)
    joint_names: tuple[str, ...]

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        object.__setattr__(self, "rest_offsets", offsets)
        n = len(parent)
        if offsets.shape != (n, 3) or len(self.joint_names) != n:
            raise FileFormatError("parent, offsets and names disagree in length")
        if not np.isfinite(offsets).all():
            raise FileFormatError("rest offsets must be finite")
        roots = [j for j, p in enumerate(parent) if p == -1]
        if roots != [0]:
            raise FileFormatError("expected exactly one root at index 0")
        if any(not 0 <= p < j for j, p in enumerate(parent) if j > 0):
            raise FileFormatError("parents must precede their children")

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parent) if p == j]

    def leaves(self) -> list[int]:
        return [j for j in range(self.n_joints) if not self.children(j)]

    def depth(self, j: int) -> int:
        d = 0
        while self.parent[j] != -1:
            j = self.parent[j]
            d += 1
        return d

    def descendants(self, j: int) -> set[int]:
        out: set[int] = set()
        for c in range(j + 1, self.n_joints):
            if self.parent[c] == j or self.parent[c] in out:
                out.add(c)
        return out


@dataclass(frozen=True)
class ShapeBasis:
    """Linear bone-offset model: ``offset(beta) = mean + sum_k beta_k B[k]``."""

    basis: np.ndarray  # (16, 22, 3)
    mean_offsets: np.ndarray  # (22, 3)

    def __post_init__(self):
        object.__setattr__(self, "basis", np.asarray(self.basis, dtype=np.float64))
        object.__setattr__(self, "mean_offsets", np.asarray(self.mean_offsets, dtype=np.float64))
        if self.basis.ndim != 3 or self.basis.shape[1:] != self.mean_offsets.shape:
            raise FileFormatError("shape basis does not match mean offsets")
        if not (np.isfinite(self.basis).all() and np.isfinite(self.mean_offsets).all()):
            raise FileFormatError("shape basis must be finite")

    def offsets(self, beta) -> torch.Tensor:
        """Per-joint bone vectors for coefficients of shape (..., 16)."""
        beta = as_tensor(beta)
        B = torch.as_tensor(self.basis, dtype=beta.dtype)
        mean = torch.as_tensor(self.mean_offsets, dtype=beta.dtype)
        return mean + torch.einsum("...k,kjc->...jc", beta, B)


@dataclass(frozen=True)
class PartitionScheme:
    joints: tuple[tuple[int, ...], ...]
    names: tuple[str, ...] = PART_NAMES
    order: np.ndarray = field(init=False, repr=False)
    inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        order = np.array([j for part in self.joints for j in part], dtype=np.int64)
        if sorted(order.tolist()) != list(range(len(order))):
            raise ValueError("partitions must cover every joint exactly once")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "inverse", np.argsort(order))

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.joints)

    @property
    def assignment(self) -> dict[int, int]:
        """Joint index to 1-based partition id."""
        return {j: p + 1 for p, part in enumerate(self.joints) for j in part}


@dataclass(frozen=True)
class SensorConfig:
    label: str
    observed_joints: tuple[int, ...]


_SENSOR_EXTRAS = {
    "hmd": (),
    "hmd1": (PELVIS,),
    "hmd2": (LEFT_ANKLE, RIGHT_ANKLE),
    "hmd3": (PELVIS, LEFT_ANKLE, RIGHT_ANKLE),
}
_SENSOR_ALIASES = {"HMD": "hmd", "HMD+1": "hmd1", "HMD+2": "hmd2", "HMD+3": "hmd3"}
SENSOR_LABELS = tuple(_SENSOR_EXTRAS)


def sensor_config(label: str) -> SensorConfig:
    key = _SENSOR_ALIASES.get(label, label)
    if key not in _SENSOR_EXTRAS:
        raise UnknownConfig(f"unknown sensor config {label!r}")
    return SensorConfig(key, tuple(sorted(ANCHORS + _SENSOR_EXTRAS[key])))


def _synthetic_basis(mean_offsets: np.ndarray) -> np.ndarray:
    B = np.zeros((N_BETAS,) + mean_offsets.shape)
    for k, group in enumerate(_SHAPE_GROUPS):
        for j in group:
            B[k, j] = _SHAPE_SCALE * mean_offsets[j]
    return B


def topology_to_dict(topo: SkeletonTopology, basis: ShapeBasis | None = None) -> dict:
    doc = {
        "format": SKELETON_FORMAT,
        "version": SKELETON_VERSION,
        "names": list(topo.joint_names),
        "parent": list(topo.parent),
        "offsets": topo.rest_offsets.tolist(),
    }
    if basis is not None:
        doc["shape_basis"] = basis.basis.tolist()
    return doc


def save_skeleton(path, topo: SkeletonTopology, basis: ShapeBasis | None = None) -> None:
    Path(path).write_text(json.dumps(topology_to_dict(topo, basis), indent=1))


def load_skeleton(path) -> tuple[SkeletonTopology, ShapeBasis]:
    """Read a skeleton JSON file; a missing shape basis gets the synthetic one."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: not valid JSON ({exc})") from exc
    return _from_dict(doc, str(path))


def _from_dict(doc, where: str) -> tuple[SkeletonTopology, ShapeBasis]:
    if not isinstance(doc, dict) or doc.get("format") != SKELETON_FORMAT:
        raise FileFormatError(f"{where}: not a skeleton file")
    if doc.get("version") != SKELETON_VERSION:
        raise FileFormatError(f"{where}: unsupported version {doc.get('version')!r}")
    try:
        topo = SkeletonTopology(
            parent=tuple(doc["parent"]),
            rest_offsets=np.array(doc["offsets"], dtype=np.float64),
            joint_names=tuple(doc["names"]),
        )
        if "shape_basis" in doc:
            B = np.array(doc["shape_basis"], dtype=np.float64)
        else:
            B = _synthetic_basis(topo.rest_offsets)
        basis = ShapeBasis(B, topo.rest_offsets)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FileFormatError):
            raise
        raise FileFormatError(f"{where}: malformed skeleton ({exc})") from exc
    return topo, basis


def default_skeleton(path=None) -> tuple[SkeletonTopology, ShapeBasis]:
    """Topology and shape basis from ``path``, the bundled file, or built-ins."""
    if path is not None:
        return load_skeleton(path)
    try:
        text = resources.files(__package__).joinpath("data/skeleton.json").read_text()
    except (FileNotFoundError, OSError):
        topo = SkeletonTopology(PARENTS, np.array(_FALLBACK_OFFSETS), JOINT_NAMES)
        return topo, ShapeBasis(_synthetic_basis(topo.rest_offsets), topo.rest_offsets)
    return _from_dict(json.loads(text), "bundled skeleton")


def default_topology(path=None) -> SkeletonTopology:
    return default_skeleton(path)[0]


def default_partition(topo: SkeletonTopology | None = None) -> PartitionScheme:
    if topo is not None and topo.n_joints != N_JOINTS:
        raise ValueError("the five-cluster partition needs the 22-joint tree")
    return PartitionScheme(_PART_JOINTS)


def forward_kinematics_matrices(topo: SkeletonTopology, basis: ShapeBasis, local_rot, root_pos, beta):
    """FK from local rotation matrices.

    Args:
        local_rot: (..., J, 3, 3); joint 0 holds the global root orientation.
        root_pos: (..., 3) position of the root joint.
        beta: (..., 16) shape coefficients, broadcastable to the leading dims.

    Returns:
        ``(positions, global_rot)`` with shapes (..., J, 3) and (..., J, 3, 3).
    """
    local_rot = as_tensor(local_rot)
    dtype = local_rot.dtype
    offsets = basis.offsets(as_tensor(beta, dtype))
    offsets = offsets.expand(*local_rot.shape[:-3], *offsets.shape[-2:])
    root_pos = as_tensor(root_pos, dtype)
    glob = [local_rot[..., 0, :, :]]
    pos = [root_pos.expand(*local_rot.shape[:-3], 3)]
    for j in range(1, topo.n_joints):
        p = topo.parent[j]
        pos.append(pos[p] + (glob[p] @ offsets[..., j, :, None])[..., 0])
        glob.append(glob[p] @ local_rot[..., j, :, :])
    return torch.stack(pos, -2), torch.stack(glob, -3)


def forward_kinematics(topo: SkeletonTopology, basis: ShapeBasis, rotations, root_pos, beta) -> torch.Tensor:
    """Joint positions (..., J, 3) from axis-angle rotations (..., J, 3)."""
    R = axis_angle_to_matrix(rotations)
    return forward_kinematics_matrices(topo, basis, R, root_pos, beta)[0]


def anchor_to_head(positions, observed_head, head: int = HEAD) -> torch.Tensor:
    """Translate each frame rigidly so the head joint lands on ``observed_head``."""
    positions = as_tensor(positions)
    shift = as_tensor(observed_head, positions.dtype) - positions[..., head, :]
    return positions + shift[..., None, :]
