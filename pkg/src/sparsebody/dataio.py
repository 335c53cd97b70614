"""Motion sequences, input features, masking, field-of-view, partitioning and files.

Per-joint feature layout (18 channels)::

    [0:3]   position (m)
    [3:6]   linear velocity (m/s)
    [6:12]  global rotation, 6D
    [12:18] per-frame delta rotation R_{t-1}^T R_t, 6D

Feature tensors are ``(..., T, 22, 18)`` torch tensors; unobserved joints
are zero in all channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import skeleton as sk
from .container import read_container, write_container
from .errors import AnchorMasked, FileFormatError, MissingAnchor, ShapeMismatch
from .rotmath import as_tensor, axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d, rot6d_to_matrix

FEATURE_DIM = 18
POS = slice(0, 3)
VEL = slice(3, 6)
ROT = slice(6, 12)
ANGVEL = slice(12, 18)
AUX_DIM = 3

CURRICULUM_START = 0.8
CURRICULUM_STEPS = 50_000
CURRICULUM_MODES = ("decaying", "continuous")


@dataclass
class MotionSequence:
    """Ground-truth motion: local axis-angle rotations, root path and shape.

    ``rotations[:, 0]`` is the global root orientation; the other joints are
    relative to their parent.
    """

    rotations: np.ndarray  # (T, 22, 3)
    root_pos: np.ndarray  # (T, 3)
    beta: np.ndarray  # (16,)
    fps: float = 60.0

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.fps = float(self.fps)
        T = self.rotations.shape[0]
        if self.rotations.shape != (T, sk.N_JOINTS, 3) or T < 2:
            raise ShapeMismatch(f"rotations must be (T>=2, 22, 3), got {self.rotations.shape}")
        if self.root_pos.shape != (T, 3):
            raise ShapeMismatch(f"root_pos must be ({T}, 3), got {self.root_pos.shape}")
        if self.beta.shape != (sk.N_BETAS,):
            raise ShapeMismatch(f"beta must be (16,), got {self.beta.shape}")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if not (np.isfinite(self.rotations).all() and np.isfinite(self.root_pos).all() and np.isfinite(self.beta).all()):
            raise ValueError("motion arrays must be finite")

    @property
    def n_frames(self) -> int:
        return self.rotations.shape[0]


def ground_truth(seq: MotionSequence, topo=None, basis=None) -> dict[str, torch.Tensor]:
    """Local/global rotation matrices and FK positions for a sequence (float64)."""
    if topo is None or basis is None:
        topo, basis = sk.default_skeleton()
    local = axis_angle_to_matrix(seq.rotations)
    pos, glob = sk.forward_kinematics_matrices(topo, basis, local, seq.root_pos, seq.beta)
    return {"local_rot": local, "global_rot": glob, "positions": pos}


def build_features(seq: MotionSequence, topo=None, basis=None) -> torch.Tensor:
    """Full-body (T, 22, 18) features of a ground-truth sequence."""
    gt = ground_truth(seq, topo, basis)
    pos, glob = gt["positions"], gt["global_rot"]
    vel = torch.empty_like(pos)
    vel[1:] = (pos[1:] - pos[:-1]) * seq.fps
    vel[0] = vel[1]
    delta = torch.empty_like(glob)
    delta[1:] = glob[:-1].transpose(-1, -2) @ glob[1:]
    delta[0] = delta[1]
    return torch.cat(
        [pos, vel, matrix_to_rot6d(glob, check=False), matrix_to_rot6d(delta, check=False)], dim=-1
    )


def present_joints(X: torch.Tensor) -> torch.Tensor:
    """Boolean (..., T, 22): whether a joint carries any signal at a frame."""
    return (X != 0).any(dim=-1)


def normalize(X, head: int = sk.HEAD) -> tuple[torch.Tensor, torch.Tensor]:
    """Head-relative horizontal positions plus a per-frame head displacement.

    Horizontal (x, y) positions of every present joint are made relative to
    the head at the same frame; heights are left alone. Zero rows stay zero.

    Returns:
        ``(X_norm, aux)`` where ``aux[..., t, :]`` is the head position at
        ``t`` minus the head position at the first frame.
    """
    X = as_tensor(X)
    if X.shape[-1] != FEATURE_DIM or X.ndim < 3:
        raise ShapeMismatch(f"expected (..., T, J, 18), got {tuple(X.shape)}")
    if not bool(present_joints(X)[..., head].all()):
        raise MissingAnchor("head channels are zero; cannot normalize")
    head_pos = X[..., head, POS]
    aux = head_pos - head_pos[..., :1, :]
    shift = torch.zeros_like(head_pos)
    shift[..., :2] = head_pos[..., :2]
    keep = present_joints(X)[..., None].to(X.dtype)
    Xn = X.clone()
    Xn[..., POS] = X[..., POS] - shift[..., None, :] * keep
    return Xn, aux


def apply_mask(X_full, m, anchors=sk.ANCHORS) -> torch.Tensor:
    """Zero every channel of joints with ``m_j = 0``, identically over time.

    ``m`` has shape (22,) or (B, 22) for a batch of (B, T, 22, C) features.
    """
    X_full = as_tensor(X_full)
    m = as_tensor(m, X_full.dtype)
    if m.shape[-1] != X_full.shape[-2]:
        raise ShapeMismatch("mask length differs from joint count")
    if bool((m[..., list(anchors)] == 0).any()):
        raise AnchorMasked("observed anchor joints may not be masked")
    return X_full * m[..., None, :, None]


def bernoulli_mask(rng: np.random.Generator, anchors=sk.ANCHORS, p_keep: float = 0.5) -> np.ndarray:
    m = rng.random(sk.N_JOINTS) < p_keep
    m[list(anchors)] = True
    return m


def sparse_mask(config: sk.SensorConfig) -> np.ndarray:
    m = np.zeros(sk.N_JOINTS, dtype=bool)
    m[list(config.observed_joints)] = True
    return m


def masked_fraction(step: int, mode: str = "decaying", horizon: int = CURRICULUM_STEPS,
                    start: float = CURRICULUM_START) -> float:
    """Share of training samples drawn as masked full-body data at ``step``."""
    if mode == "continuous":
        return start
    if mode != "decaying":
        raise ValueError(f"unknown curriculum mode {mode!r}")
    return max(0.0, start * (1.0 - step / horizon))


@dataclass(frozen=True)
class CurriculumState:
    step: int = 0
    mode: str = "decaying"
    horizon: int = CURRICULUM_STEPS

    @property
    def masked_fraction(self) -> float:
        return masked_fraction(self.step, self.mode, self.horizon)


def sample_mask(rng: np.random.Generator, config: sk.SensorConfig, curriculum: CurriculumState) -> np.ndarray:
    """Draw one window's mask.

    With probability ``curriculum.masked_fraction`` every non-sensor joint
    is kept with probability 0.5; otherwise only the sensor joints are kept.
    """
    if rng.random() < curriculum.masked_fraction:
        return bernoulli_mask(rng, config.observed_joints)
    return sparse_mask(config)


def apply_fov(X, fov_degrees: float = 120.0, forward_axis=(0.0, 1.0, 0.0), head: int = sk.HEAD,
              hands=(sk.LEFT_WRIST, sk.RIGHT_WRIST)) -> torch.Tensor:
    """Drop hand signals at frames where the hand leaves the headset's view cone.

    The cone is centered on the head's local ``forward_axis`` (read from the
    head's 6D rotation channels) with half-angle ``fov_degrees / 2``; the
    boundary counts as visible. Translation-invariant, so it may run before
    or after :func:`normalize`.
    """
    X = as_tensor(X)
    R = rot6d_to_matrix(X[..., head, ROT], check=False)
    fwd = R @ torch.as_tensor(forward_axis, dtype=X.dtype)
    cos_half = math.cos(math.radians(fov_degrees / 2.0))
    out = X.clone()
    for h in hands:
        d = X[..., h, POS] - X[..., head, POS]
        inside = (d * fwd).sum(-1) >= cos_half * d.norm(dim=-1) - 1e-9
        out[..., h, :] = X[..., h, :] * inside[..., None].to(X.dtype)
    return out


def partition(X, scheme: sk.PartitionScheme) -> list[torch.Tensor]:
    X = as_tensor(X)
    return [X[..., list(part), :] for part in scheme.joints]


def merge(parts, scheme: sk.PartitionScheme) -> torch.Tensor:
    """Inverse of :func:`partition`."""
    stacked = torch.cat(list(parts), dim=-2)
    return stacked[..., torch.as_tensor(scheme.inverse), :]


# ---------------------------------------------------------------------------
# synthetic motion

_PART_PHASE = {"torso": 0.0, "left_arm": math.pi, "right_arm": 0.0, "left_leg": 0.0, "right_leg": math.pi}


def _rx(a):
    return axis_angle_to_matrix(np.stack([a, 0 * a, 0 * a], -1))


def _ry(a):
    return axis_angle_to_matrix(np.stack([0 * a, a, 0 * a], -1))


def _rz(a):
    return axis_angle_to_matrix(np.stack([0 * a, 0 * a, a], -1))


def synth_sequence(rng: np.random.Generator, n_frames: int = 200, fps: float = 60.0) -> MotionSequence:
    """One procedurally generated gait-like sequence."""
    if n_frames < 2:
        raise ValueError("need at least two frames")
    t = np.arange(n_frames) / fps
    freq = rng.uniform(0.6, 1.2)
    amp = rng.uniform(0.6, 1.0)
    phase0 = rng.uniform(0.0, 2 * math.pi)
    yaw0 = rng.uniform(-math.pi, math.pi)
    yaw_rate = rng.uniform(-0.3, 0.3)
    beta = rng.uniform(-1.0, 1.0, size=sk.N_BETAS)
    theta = 2 * math.pi * freq * t + phase0

    def wave(part, k=1.0):
        return np.sin(k * theta + _PART_PHASE[part])

    R = torch.eye(3, dtype=torch.float64).repeat(n_frames, sk.N_JOINTS, 1, 1)
    yaw = yaw0 + yaw_rate * t
    R[:, 0] = _rz(yaw) @ _ry(0.05 * amp * wave("torso"))
    for j, scale in ((3, 0.04), (6, 0.04), (9, 0.04)):
        R[:, j] = _rz(-scale * amp * wave("torso")) @ _rx(0.03 * np.ones_like(t))
    R[:, 12] = _rx(0.05 * amp * wave("torso", 2.0))
    R[:, 15] = _rx(-0.08 + 0.06 * amp * wave("torso", 2.0))
    for side, hip, knee, ankle in (("left_leg", 1, 4, 7), ("right_leg", 2, 5, 8)):
        s = wave(side)
        R[:, hip] = _rx(0.45 * amp * s)
        R[:, knee] = _rx(-0.35 * amp * (1.0 + np.cos(theta + _PART_PHASE[side])))
        R[:, ankle] = _rx(0.15 * amp * s)
    for side, sign, collar, shoulder, elbow, wrist in (
        ("left_arm", 1.0, 13, 16, 18, 20),
        ("right_arm", -1.0, 14, 17, 19, 21),
    ):
        s = wave(side)
        R[:, collar] = _ry(sign * 0.05 * amp * s)
        R[:, shoulder] = _rx(0.4 * amp * s) @ _ry(sign * 1.25 * np.ones_like(t))
        R[:, elbow] = _rz(sign * (0.3 + 0.25 * amp * (1.0 + s)))
        R[:, wrist] = _rx(0.1 * amp * s)

    heading = np.stack([-np.sin(yaw), np.cos(yaw)], -1)
    speed = 0.3 * amp * freq
    walk = np.cumsum(rng.normal(0.0, 0.002, size=(n_frames, 2)), axis=0)
    horiz = np.cumsum(heading * speed / fps, axis=0) + walk
    height = 0.92 + 0.039 * beta[0] + 0.015 * amp * np.cos(2 * theta)
    root = np.concatenate([horiz, height[:, None]], -1)

    # round through float32 so the sequence survives the container exactly
    rot = matrix_to_axis_angle(R).numpy().astype(np.float32).astype(np.float64)
    return MotionSequence(
        rotations=rot,
        root_pos=root.astype(np.float32).astype(np.float64),
        beta=beta.astype(np.float32).astype(np.float64),
        fps=fps,
    )


def synth_dataset(rng, n_sequences: int, n_frames: int = 200, fps: float = 60.0) -> list[MotionSequence]:
    """``n_sequences`` synthetic sequences; ``rng`` may be a seed or a Generator."""
    rng = np.random.default_rng(rng)
    return [synth_sequence(rng, n_frames, fps) for _ in range(n_sequences)]


# ---------------------------------------------------------------------------
# files

MOTION_JSON_FORMAT = "sparsebody-motion"


def save_motion_file(seq: MotionSequence, path, format: str = "atmo") -> None:
    if format == "json":
        doc = {
            "format": MOTION_JSON_FORMAT,
            "version": 1,
            "T": seq.n_frames,
            "fps": seq.fps,
            "n_joints": sk.N_JOINTS,
            "rotations": seq.rotations.tolist(),
            "root_pos": seq.root_pos.tolist(),
            "beta": seq.beta.tolist(),
        }
        Path(path).write_text(json.dumps(doc))
        return
    if format != "atmo":
        raise ValueError(f"unknown motion format {format!r}")
    header = {"kind": "motion", "T": seq.n_frames, "fps": seq.fps, "n_joints": sk.N_JOINTS}
    arrays = {
        "rotations": seq.rotations.astype("<f4"),
        "root_pos": seq.root_pos.astype("<f4"),
        "beta": seq.beta.astype("<f4"),
    }
    write_container(path, header, arrays)


def load_motion_file(path) -> MotionSequence:
    """Read a motion container or its JSON export."""
    with open(path, "rb") as fh:
        lead = fh.read(4)
    if lead.lstrip()[:1] == b"{":
        return _load_motion_json(path)
    header, arrays = read_container(path, kind="motion")
    try:
        seq = MotionSequence(arrays["rotations"], arrays["root_pos"], arrays["beta"], header["fps"])
    except (KeyError, ShapeMismatch) as exc:
        raise FileFormatError(f"{path}: incomplete motion file ({exc})") from exc
    if seq.n_frames != header.get("T"):
        raise FileFormatError(f"{path}: header T disagrees with data")
    return seq


def _load_motion_json(path) -> MotionSequence:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != MOTION_JSON_FORMAT:
            raise FileFormatError(f"{path}: not a motion JSON file")
        return MotionSequence(doc["rotations"], doc["root_pos"], doc["beta"], doc["fps"])
    except (json.JSONDecodeError, KeyError, ShapeMismatch) as exc:
        raise FileFormatError(f"{path}: malformed motion JSON ({exc})") from exc


def save_sparse_file(path, features, observed, fps: float = 60.0) -> None:
    """Store raw (unnormalized) tracking features with their observed-joint flags."""
    features = as_tensor(features).numpy()
    header = {"kind": "sparse", "T": int(features.shape[0]), "fps": float(fps), "n_joints": sk.N_JOINTS}
    write_container(path, header, {"features": features.astype("<f4"), "observed": np.asarray(observed, dtype="u1")})


def load_sparse_file(path) -> tuple[torch.Tensor, np.ndarray, float]:
    header, arrays = read_container(path, kind="sparse")
    try:
        feats = torch.as_tensor(arrays["features"].astype(np.float64))
        observed = arrays["observed"].astype(bool)
    except KeyError as exc:
        raise FileFormatError(f"{path}: incomplete sparse file") from exc
    if feats.shape[1:] != (sk.N_JOINTS, FEATURE_DIM):
        raise FileFormatError(f"{path}: features must be (T, 22, 18)")
    return feats, observed, float(header["fps"])


def file_kind(path) -> str:
    """``'motion'``, ``'sparse'``, ``'checkpoint'`` or ``'json'``."""
    with open(path, "rb") as fh:
        lead = fh.read(4)
    if lead.lstrip()[:1] == b"{":
        return "json"
    return read_container(path)[0].get("kind", "")
