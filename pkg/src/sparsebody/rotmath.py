"""Rotation conversions between 6D, matrix and axis-angle encodings.

Matrices act on column vectors. The 6D encoding stacks the first two
columns of the matrix, ``r = [R[:, 0], R[:, 1]]``. All functions accept
arrays or tensors with arbitrary leading batch dimensions and return
tensors; numpy inputs are promoted to float64.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import DegenerateInput, InvalidRotation

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

_NORM_EPS = 1e-8
_ORTHO_TOL = 1e-4
_SMALL_ANGLE = 1e-6
_NEAR_PI = 1e-2


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def skew(v: torch.Tensor) -> torch.Tensor:
    """Cross-product matrix ``[v]_x`` for vectors of shape (..., 3)."""
    x, y, z = v.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([o, -z, y], -1),
            torch.stack([z, o, -x], -1),
            torch.stack([-y, x, o], -1),
        ],
        -2,
    )


def _vee(m: torch.Tensor) -> torch.Tensor:
    return torch.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], -1)


def rot6d_to_matrix(r, check: bool = True) -> torch.Tensor:
    """Gram-Schmidt map from 6D to a rotation matrix.

    Args:
        r: (..., 6) two stacked column vectors.
        check: raise :class:`DegenerateInput` on vanishing or parallel
            columns. With ``check=False`` the norms are clamped instead,
            which keeps the map usable inside training graphs.

    Returns:
        (..., 3, 3) rotation matrices.
    """
    r = as_tensor(r)
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = a1.norm(dim=-1, keepdim=True)
    if check and bool((n1 <= _NORM_EPS).any()):
        raise DegenerateInput("first 6D column has vanishing norm")
    b1 = a1 / n1.clamp_min(_NORM_EPS)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = u2.norm(dim=-1, keepdim=True)
    if check:
        if bool((a2.norm(dim=-1) <= _NORM_EPS).any()):
            raise DegenerateInput("second 6D column has vanishing norm")
        if bool((n2 <= _NORM_EPS * a2.norm(dim=-1, keepdim=True)).any()):
            raise DegenerateInput("6D columns are parallel")
    b2 = u2 / n2.clamp_min(_NORM_EPS)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def check_rotation(R, tol: float = _ORTHO_TOL) -> None:
    """Raise :class:`InvalidRotation` unless ``R^T R = I`` and ``det R = 1``."""
    R = as_tensor(R)
    eye = torch.eye(3, dtype=R.dtype)
    ortho = (R.transpose(-1, -2) @ R - eye).abs()
    if ortho.numel() and float(ortho.max()) > tol:
        raise InvalidRotation(f"orthonormality violated by {float(ortho.max()):.3g}")
    det = torch.linalg.det(R)
    if det.numel() and float((det - 1).abs().max()) > tol:
        raise InvalidRotation("determinant differs from +1")


def matrix_to_rot6d(R, check: bool = True) -> torch.Tensor:
    R = as_tensor(R)
    if check:
        check_rotation(R)
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def axis_angle_to_matrix(v) -> torch.Tensor:
    """Rodrigues' formula, with a Taylor branch near the identity."""
    v = as_tensor(v)
    theta2 = (v * v).sum(-1)
    small = theta2 < _SMALL_ANGLE**2
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    K = skew(v)
    eye = torch.eye(3, dtype=v.dtype).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _canonical_sign(n: torch.Tensor) -> torch.Tensor:
    # sign of the first component whose magnitude is non-negligible
    nz = n.abs() > 1e-12
    first = torch.argmax(nz.to(torch.int64), dim=-1, keepdim=True)
    s = torch.sign(torch.gather(n, -1, first))
    return torch.where(s == 0, torch.ones_like(s), s)


def matrix_to_axis_angle(R) -> torch.Tensor:
    """Inverse of :func:`axis_angle_to_matrix` with angle in ``[0, pi]``.

    Near pi the axis is recovered from the symmetric part of ``R``; at
    exactly pi its sign is fixed so the first nonzero component is positive.
    """
    R = as_tensor(R)
    tr = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0)
    w = _vee(R - R.transpose(-1, -2)) / 2.0  # sin(theta) * axis
    sin = w.norm(dim=-1)
    theta = torch.atan2(sin, cos)

    small = theta < _SMALL_ANGLE
    safe_sin = torch.where(small, torch.ones_like(sin), sin)
    generic = w * torch.where(small, 1.0 + theta**2 / 6.0, theta / safe_sin)[..., None]

    # axis from R + R^T = 2 cos I + 2 (1 - cos) n n^T
    sym = (R + R.transpose(-1, -2)) / 2.0
    eye = torch.eye(3, dtype=R.dtype)
    nnT = (sym - cos[..., None, None] * eye) / (1.0 - cos).clamp_min(1e-12)[..., None, None]
    diag = torch.diagonal(nnT, dim1=-2, dim2=-1)
    k = torch.argmax(diag, dim=-1)
    col = torch.gather(nnT, -1, k[..., None, None].expand(*k.shape, 3, 1))[..., 0]
    axis = col / col.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    dot = (axis * w).sum(-1, keepdim=True)
    sign = torch.where(dot.abs() > 1e-12, torch.sign(dot), _canonical_sign(axis))
    near_pi_v = sign * axis * theta[..., None]

    near_pi = (theta > math.pi - _NEAR_PI)[..., None]
    return torch.where(near_pi, near_pi_v, generic)


def rot6d_to_axis_angle(r, check: bool = True) -> torch.Tensor:
    return matrix_to_axis_angle(rot6d_to_matrix(r, check=check))


def axis_angle_to_rot6d(v) -> torch.Tensor:
    return matrix_to_rot6d(axis_angle_to_matrix(v), check=False)


def geodesic_angle(R1, R2) -> torch.Tensor:
    """Angle of ``R1^T R2`` in radians, in ``[0, pi]``.

    Evaluated as ``atan2(|sin|, cos)`` which equals
    ``arccos(clamp((trace - 1) / 2))`` but stays accurate near 0 and pi.
    """
    M = as_tensor(R1).transpose(-1, -2) @ as_tensor(R2)
    tr = M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2]
    cos = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0)
    sin = (_vee(M - M.transpose(-1, -2)) / 2.0).norm(dim=-1)
    return torch.atan2(sin, cos)


def angular_velocity_6d(r_t, r_prev, dt: float) -> torch.Tensor:
    """Per-frame delta rotation ``R_prev^T R_t`` in 6D.

    ``dt`` is validated but not divided in: the delta rotation itself is
    the feature, since a 6D slot has no meaningful per-second scaling.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    R_t = rot6d_to_matrix(r_t)
    R_prev = rot6d_to_matrix(r_prev)
    return matrix_to_rot6d(R_prev.transpose(-1, -2) @ R_t, check=False)


def rotation_about(axis, angle) -> torch.Tensor:
    """Rotation by ``angle`` radians about a (not necessarily unit) axis."""
    axis = as_tensor(axis)
    axis = axis / axis.norm(dim=-1, keepdim=True)
    return axis_angle_to_matrix(axis * as_tensor(angle, axis.dtype)[..., None])


def random_rotations(rng: np.random.Generator, n: int, max_angle: float = math.pi) -> torch.Tensor:
    """Sample ``n`` rotations via the axis-angle exponential map."""
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0.0, max_angle, size=(n, 1))
    return axis_angle_to_matrix(axis * angle)
