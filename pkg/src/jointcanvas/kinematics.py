"""Forward/inverse kinematics for a 7-joint DH arm with a binary gripper.

Frame ``i`` (0..6) is the pose after DH row ``i``; frame 7 is the end
effector (frame 6 composed with the fixed tool transform). Joint ``i``
rotates about the z-axis of frame ``i - 1``, where frame ``-1`` is the base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import geometry as geo
from .errors import InsufficientConstraints, LimitViolation, NonConvergent

N_JOINTS = 7
EE_FRAME = 7
SPHERE_JOINT_NAMES = ("base", "elbow", "wrist", "gripper")
OPEN = "open"
CLOSED = "closed"


@dataclass(frozen=True, eq=False)
class ArmModel:
    dh: np.ndarray  # (7, 4): a, d, alpha, theta_offset
    limits: np.ndarray  # (7, 2)
    rate_limit: float
    base_pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    tool: np.ndarray = field(default_factory=lambda: np.eye(4))
    sphere_joints: dict = field(
        default_factory=lambda: {"base": 0, "elbow": 3, "wrist": 5, "gripper": EE_FRAME}
    )
    home: np.ndarray | None = None

    def __post_init__(self):
        dh = np.asarray(self.dh, dtype=float)
        limits = np.asarray(self.limits, dtype=float)
        if dh.shape != (N_JOINTS, 4) or not np.all(np.isfinite(dh)):
            raise ValueError("dh must be a finite 7x4 table")
        if limits.shape != (N_JOINTS, 2) or np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint limits need lo < hi for all 7 joints")
        if not self.rate_limit > 0:
            raise ValueError("rate_limit must be positive")
        for name, idx in self.sphere_joints.items():
            if not 0 <= idx <= EE_FRAME:
                raise ValueError(f"sphere joint {name} references invalid frame {idx}")
        object.__setattr__(self, "dh", dh)
        object.__setattr__(self, "limits", limits)
        object.__setattr__(self, "base_pose", np.asarray(self.base_pose, dtype=float))
        object.__setattr__(self, "tool", np.asarray(self.tool, dtype=float))
        if self.home is not None:
            object.__setattr__(self, "home", np.asarray(self.home, dtype=float))

    def home_config(self) -> "JointConfig":
        q = np.zeros(N_JOINTS) if self.home is None else self.home
        return JointConfig(q.copy(), OPEN)

    def clamp(self, q) -> np.ndarray:
        return np.clip(q, self.limits[:, 0], self.limits[:, 1])


@dataclass(frozen=True, eq=False)
class JointConfig:
    q: np.ndarray
    gripper: str = OPEN

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(N_JOINTS)
        if not np.all(np.isfinite(q)):
            raise ValueError("joint angles must be finite")
        if self.gripper not in (OPEN, CLOSED):
            raise ValueError(f"gripper must be 'open' or 'closed', got {self.gripper!r}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    def with_q(self, q) -> "JointConfig":
        return replace(self, q=np.asarray(q, dtype=float))

    def with_gripper(self, gripper: str) -> "JointConfig":
        return replace(self, gripper=gripper)

    def as_vector(self) -> np.ndarray:
        """Width-8 action vector: 7 joints plus gripper (1 = open)."""
        return np.append(self.q, 1.0 if self.gripper == OPEN else 0.0)

    @classmethod
    def from_vector(cls, v) -> "JointConfig":
        v = np.asarray(v, dtype=float)
        return cls(v[:N_JOINTS], OPEN if v[N_JOINTS] >= 0.5 else CLOSED)

    def to_json(self) -> dict:
        return {"q": [float(x) for x in self.q], "gripper": self.gripper}

    @classmethod
    def from_json(cls, d: dict) -> "JointConfig":
        return cls(np.array(d["q"], dtype=float), d["gripper"])

    def __repr__(self) -> str:
        return f"JointConfig(q={np.round(self.q, 4).tolist()}, gripper={self.gripper!r})"


@dataclass(frozen=True, eq=False)
class FramePoses:
    transforms: np.ndarray  # (8, 4, 4)

    def position(self, frame: int) -> np.ndarray:
        return self.transforms[frame, :3, 3]

    def rotation(self, frame: int) -> np.ndarray:
        return self.transforms[frame, :3, :3]

    @property
    def ee(self) -> np.ndarray:
        return self.transforms[EE_FRAME]


def dh_matrix(a: float, d: float, alpha: float, theta: float) -> np.ndarray:
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def check_limits(arm: ArmModel, q, tol: float = 1e-9) -> np.ndarray:
    """Wrap to (-pi, pi] and verify joint limits."""
    q = geo.wrap_angle(np.asarray(q, dtype=float))
    lo, hi = arm.limits[:, 0], arm.limits[:, 1]
    bad = np.nonzero((q < lo - tol) | (q > hi + tol))[0]
    if bad.size:
        i = int(bad[0])
        raise LimitViolation(f"joint {i} at {q[i]:.6f} rad outside [{lo[i]:.4f}, {hi[i]:.4f}]")
    return q


def forward_kinematics(arm: ArmModel, cfg: JointConfig | np.ndarray) -> FramePoses:
    q = cfg.q if isinstance(cfg, JointConfig) else cfg
    q = check_limits(arm, q)
    out = np.empty((EE_FRAME + 1, 4, 4))
    T = arm.base_pose
    for i in range(N_JOINTS):
        a, d, alpha, off = arm.dh[i]
        T = T @ dh_matrix(a, d, alpha, q[i] + off)
        out[i] = T
    out[EE_FRAME] = T @ arm.tool
    return FramePoses(out)


def _axes_and_origins(arm: ArmModel, poses: FramePoses):
    """Joint axes z_{i-1} and points p_{i-1} for i = 0..6."""
    z = np.empty((N_JOINTS, 3))
    p = np.empty((N_JOINTS, 3))
    z[0], p[0] = arm.base_pose[:3, 2], arm.base_pose[:3, 3]
    z[1:] = poses.transforms[: N_JOINTS - 1, :3, 2]
    p[1:] = poses.transforms[: N_JOINTS - 1, :3, 3]
    return z, p


def _moving_joints(frame: int) -> int:
    return min(frame, N_JOINTS - 1) + 1


def point_jacobian(arm: ArmModel, cfg, frame_index: int, offset=None, poses: FramePoses | None = None) -> np.ndarray:
    """3x7 positional Jacobian of a point fixed in ``frame_index``."""
    if not 0 <= frame_index <= EE_FRAME:
        raise ValueError(f"invalid frame index {frame_index}")
    if poses is None:
        poses = forward_kinematics(arm, cfg)
    T = poses.transforms[frame_index]
    point = T[:3, 3] if offset is None else geo.apply(T, offset)
    z, p = _axes_and_origins(arm, poses)
    J = np.zeros((3, N_JOINTS))
    n = _moving_joints(frame_index)
    J[:, :n] = np.cross(z[:n], point - p[:n]).T
    return J


def sphere_axis(arm: ArmModel, poses: FramePoses, frame: int) -> np.ndarray:
    """Rotation axis of the joint that spins ``frame`` about its own origin."""
    j = _moving_joints(frame) - 1
    z, _ = _axes_and_origins(arm, poses)
    return z[j]


@dataclass(frozen=True)
class SpherePose:
    center: np.ndarray
    axis: np.ndarray
    normal: np.ndarray  # frame x-axis; perpendicular to axis

    @property
    def spin(self) -> float:
        return geo.spin_angle(self.axis, self.normal)


def sphere_poses(arm: ArmModel, cfg, poses: FramePoses | None = None) -> dict[str, SpherePose]:
    if poses is None:
        poses = forward_kinematics(arm, cfg)
    out = {}
    for name in SPHERE_JOINT_NAMES:
        f = arm.sphere_joints[name]
        out[name] = SpherePose(
            poses.position(f).copy(), sphere_axis(arm, poses, f).copy(), poses.rotation(f)[:, 0].copy()
        )
    return out


# --- inverse kinematics -------------------------------------------------


@dataclass(frozen=True)
class PointConstraint:
    frame: int
    target: np.ndarray
    offset: np.ndarray | None = None
    weight: float = 1.0


@dataclass(frozen=True)
class SpinConstraint:
    """Frame x-axis should equal ``spin_direction(axis, angle)``.

    Soft: the residual is ``weight * (x_f - n)``, in metre-equivalents.
    """

    frame: int
    axis: np.ndarray
    angle: float
    weight: float = 0.05

    def direction(self) -> np.ndarray:
        return geo.spin_direction(self.axis, self.angle)


@dataclass(frozen=True, eq=False)
class IkResult:
    config: JointConfig
    residual: float  # largest per-constraint error, metres
    iterations: int
    converged: bool


def _residual_and_jacobian(arm, q, constraints, with_jac=True):
    poses = forward_kinematics(arm, q)
    z, p = _axes_and_origins(arm, poses)
    errs, rows = [], []
    for c in constraints:
        T = poses.transforms[c.frame]
        n = _moving_joints(c.frame)
        if isinstance(c, PointConstraint):
            pt = T[:3, 3] if c.offset is None else geo.apply(T, c.offset)
            e = c.weight * (pt - c.target)
            if with_jac:
                J = np.zeros((3, N_JOINTS))
                J[:, :n] = c.weight * np.cross(z[:n], pt - p[:n]).T
        else:
            x = T[:3, 0]
            e = c.weight * (x - c.direction())
            if with_jac:
                J = np.zeros((3, N_JOINTS))
                J[:, :n] = c.weight * np.cross(z[:n], x).T
        errs.append(e)
        if with_jac:
            rows.append(J)
    e = np.concatenate(errs)
    return e, (np.vstack(rows) if with_jac else None)


def _max_error(e: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(e.reshape(-1, 3), axis=1)))


def solve_ik(
    arm: ArmModel,
    q_init: JointConfig,
    constraints: Sequence[PointConstraint | SpinConstraint],
    *,
    tol: float = 1e-4,
    max_iter: int = 200,
    strict: bool = True,
) -> IkResult:
    """Damped least squares with a Levenberg-Marquardt damping schedule.

    Stops once every constraint error is below ``tol`` or the iterate stops
    moving. With ``strict`` a result above ``tol`` raises NonConvergent
    carrying the best iterate; otherwise it is returned with
    ``converged=False``.
    """
    n_points = sum(isinstance(c, PointConstraint) for c in constraints)
    if n_points < 2:
        raise InsufficientConstraints(f"need at least 2 point constraints, got {n_points}")
    q = check_limits(arm, q_init.q)
    e, J = _residual_and_jacobian(arm, q, constraints)
    cost = float(e @ e)
    lam = 1e-3
    it = 0
    while it < max_iter and _max_error(e) >= tol:
        it += 1
        H = J.T @ J
        g = J.T @ e
        step = np.linalg.solve(H + lam * np.eye(N_JOINTS), -g)
        q_new = arm.clamp(geo.wrap_angle(q + step))
        e_new, _ = _residual_and_jacobian(arm, q_new, constraints, with_jac=False)
        cost_new = float(e_new @ e_new)
        if cost_new < cost:
            moved = float(np.max(np.abs(q_new - q)))
            improvement = cost - cost_new
            q, e, cost = q_new, e_new, cost_new
            _, J = _residual_and_jacobian(arm, q, constraints)
            lam = max(lam / 3.0, 1e-9)
            if moved < 1e-12 or improvement < 1e-18:
                break
        else:
            lam *= 10.0
            if lam > 1e8:
                break
    res = _max_error(e)
    result = IkResult(JointConfig(q, q_init.gripper), res, it, res < tol)
    if strict and not result.converged:
        raise NonConvergent(f"IK residual {res:.3e} m after {it} iterations", result, res)
    return result


def interpolate_joints(q_a: JointConfig, q_b: JointConfig, K: int) -> list[JointConfig]:
    """K evenly spaced configs ending exactly at ``q_b``; gripper switches on the last."""
    if K < 1:
        raise ValueError("K must be >= 1")
    a, b = q_a.q, q_b.q
    out = []
    for k in range(1, K + 1):
        q = b.copy() if k == K else a + (k / K) * (b - a)
        out.append(JointConfig(q, q_b.gripper if k == K else q_a.gripper))
    return out


def sphere_point_constraints(arm: ArmModel, cfg: JointConfig) -> list[PointConstraint]:
    poses = forward_kinematics(arm, cfg)
    return [
        PointConstraint(arm.sphere_joints[n], poses.position(arm.sphere_joints[n]).copy())
        for n in SPHERE_JOINT_NAMES
    ]
