"""Plain-text arm and camera-rig description.

The format is INI (``key = value`` rows) with one ``[jointN]`` section per
DH row and one ``[camera.NAME]`` section per view. Vectors are whitespace
separated. See ``DEFAULT_CONFIG`` for every recognised key.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import geometry as geo
from .camera import VIEW_ORDER, Camera, CameraRig, Intrinsics
from .errors import ConfigError
from .kinematics import N_JOINTS, ArmModel

DEFAULT_CONFIG = """\
[arm]
rate_limit = 0.05
# x y z roll pitch yaw (m, rad)
base_pose = 0 0 0.05 0 0 0
tool = 0 0 0.1 0 0 0
home = 0 0.469 0 -1.748 0 0.925 0
sphere_joints = base:0 elbow:3 wrist:5 gripper:7

[joint1]
a = 0
d = 0.36
alpha = -1.5707963267948966
theta_offset = 0
lower = -2.96
upper = 2.96

[joint2]
a = 0
d = 0
alpha = 1.5707963267948966
theta_offset = 0
lower = -2.09
upper = 2.09

[joint3]
a = 0
d = 0.40
alpha = 1.5707963267948966
theta_offset = 0
lower = -2.96
upper = 2.96

[joint4]
a = 0
d = 0
alpha = -1.5707963267948966
theta_offset = 0
lower = -2.6
upper = 2.6

[joint5]
a = 0
d = 0.40
alpha = -1.5707963267948966
theta_offset = 0
lower = -2.96
upper = 2.96

[joint6]
a = 0
d = 0
alpha = 1.5707963267948966
theta_offset = 0
lower = -2.09
upper = 2.09

[joint7]
a = 0
d = 0.126
alpha = 0
theta_offset = 0
lower = -3.05
upper = 3.05

[camera.front]
mount = world
eye = 1.5 0 0.8
look_at = 0.4 0 0.35
sphere_radius = 0.08

[camera.wrist]
mount = ee
eye = 0.07 0 -0.12
look_at = 0 0 0.15
up = -1 0 0
sphere_radius = 0.03

[camera.left_shoulder]
mount = world
eye = -0.15 0.65 1.0
look_at = 0.4 0 0.3
sphere_radius = 0.065

[camera.right_shoulder]
mount = world
eye = -0.15 -0.65 1.0
look_at = 0.4 0 0.3
sphere_radius = 0.065
"""


@dataclass(frozen=True, eq=False)
class RobotSetup:
    arm: ArmModel
    rig: CameraRig


def _vec(section, key, n=None, default=None) -> np.ndarray:
    if key not in section:
        if default is None:
            raise ConfigError(f"[{section.name}] missing key '{key}'")
        return np.asarray(default, dtype=float)
    try:
        v = np.array([float(x) for x in section[key].split()])
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    if n is not None and v.size != n:
        raise ConfigError(f"[{section.name}] {key}: expected {n} numbers, got {v.size}")
    return v


def _pose6(section, key, default=(0, 0, 0, 0, 0, 0)) -> np.ndarray:
    return geo.from_xyz_rpy(*_vec(section, key, 6, default))


def parse_config(text: str) -> RobotSetup:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "arm" not in cp:
        raise ConfigError("missing [arm] section")
    arm_s = cp["arm"]
    dh, limits = [], []
    for i in range(1, N_JOINTS + 1):
        name = f"joint{i}"
        if name not in cp:
            raise ConfigError(f"missing [{name}] section")
        s = cp[name]
        dh.append([float(_vec(s, k, 1)[0]) for k in ("a", "d", "alpha", "theta_offset")])
        limits.append([float(_vec(s, "lower", 1)[0]), float(_vec(s, "upper", 1)[0])])
    joints = {}
    for item in arm_s.get("sphere_joints", "base:0 elbow:3 wrist:5 gripper:7").split():
        k, _, v = item.partition(":")
        joints[k] = int(v)
    try:
        arm = ArmModel(
            dh=np.array(dh),
            limits=np.array(limits),
            rate_limit=float(_vec(arm_s, "rate_limit", 1)[0]),
            base_pose=_pose6(arm_s, "base_pose"),
            tool=_pose6(arm_s, "tool"),
            sphere_joints=joints,
            home=_vec(arm_s, "home", N_JOINTS, np.zeros(N_JOINTS)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    cams = {}
    for name in VIEW_ORDER:
        key = f"camera.{name}"
        if key not in cp:
            raise ConfigError(f"missing [{key}] section")
        s = cp[key]
        intr = Intrinsics(
            fx=float(s.get("fx", 221.0)),
            fy=float(s.get("fy", 221.0)),
            cx=float(s.get("cx", 127.5)),
            cy=float(s.get("cy", 127.5)),
            width=int(s.get("width", 256)),
            height=int(s.get("height", 256)),
        )
        if "pose" in s:
            mount = _pose6(s, "pose")
        else:
            mount = geo.look_at(_vec(s, "eye", 3), _vec(s, "look_at", 3), _vec(s, "up", 3, (0, 0, 1)))
        kind = s.get("mount", "world")
        if kind not in ("world", "ee"):
            raise ConfigError(f"[{key}] mount must be 'world' or 'ee'")
        cams[name] = Camera(name, intr, mount, kind == "ee", float(s.get("sphere_radius", 0.05)))
    try:
        rig = CameraRig(cams)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RobotSetup(arm, rig)


def load_config(path: str | Path | None = None) -> RobotSetup:
    if path is None:
        return default_setup()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


@lru_cache(maxsize=1)
def default_setup() -> RobotSetup:
    return parse_config(DEFAULT_CONFIG)
