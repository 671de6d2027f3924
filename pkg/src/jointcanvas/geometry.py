"""Small rigid-body helpers on 4x4 homogeneous matrices."""

from __future__ import annotations

import math

import numpy as np


def transform(R: np.ndarray | None = None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def invert(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def apply(T: np.ndarray, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p @ T[:3, :3].T + T[:3, 3]


def rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def from_xyz_rpy(x, y, z, roll, pitch, yaw) -> np.ndarray:
    R = rotation((0, 0, 1), yaw) @ rotation((0, 1, 0), pitch) @ rotation((1, 0, 0), roll)
    return transform(R, (x, y, z))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose with +z toward target, +x right, +y down."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (1.0, 0.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return transform(np.column_stack([x, y, z]), eye)


def wrap_angle(a):
    """Map angles to (-pi, pi]; an exact -pi maps to +pi."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + math.pi, 2.0 * math.pi) - math.pi
    out = np.where(out <= -math.pi, out + 2.0 * math.pi, out)
    out = np.where((a > -math.pi) & (a <= math.pi), a, out)  # in range: untouched, bit-exact
    return out if out.ndim else float(out)


def spin_reference(axis) -> np.ndarray:
    """Zero-spin direction perpendicular to ``axis``.

    The world basis vector least aligned with the axis is projected onto the
    plane normal to it. Discontinuous where two components tie, which is
    harmless: anything measured against it is converted back to a world
    direction with the same axis.
    """
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(a)))] = 1.0
    r = e - (e @ a) * a
    return r / np.linalg.norm(r)


def spin_direction(axis, angle: float) -> np.ndarray:
    """World direction obtained by spinning the reference about ``axis``."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    r = spin_reference(a)
    return math.cos(angle) * r + math.sin(angle) * np.cross(a, r)


def spin_angle(axis, direction) -> float:
    """Inverse of :func:`spin_direction`, in (-pi, pi]."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    r = spin_reference(a)
    d = np.asarray(direction, dtype=float)
    return float(wrap_angle(math.atan2(np.cross(a, r) @ d, r @ d)))


def yaw_of(R: np.ndarray) -> float:
    """Heading of a rotation's x-axis in the world xy-plane."""
    return math.atan2(R[1, 0], R[0, 0])


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))
