"""Kinematic tabletop tasks, scripted experts and success predicates.

The world is quasi-static: no gravity, no friction, and grasping is a
distance test. Joints track their command at no more than ``rate_limit``
radians per control step (20 Hz).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry as geo
from . import kinematics as kin
from . import render
from .camera import VIEW_ORDER, CameraRig, rig_world_poses
from .errors import EmptyDemo, ExpertFailure, IoFailure, NonConvergent, UnknownTask
from .kinematics import CLOSED, OPEN, ArmModel, JointConfig

DEMO_FORMAT = "jointcanvas-demo"
DEMO_VERSION = 1
GRASP_DISTANCE = 0.02
TABLE_BOUNDS = (0.1, 1.0, -0.55, 0.55)
EXPERT_SPEED = 0.4  # fraction of rate_limit used by expert segments
GRIPPER_HOLD = 6
SKIP_DISTANCE = 0.01
APPROACH_HEIGHT = 0.09
LINK_RADIUS = 0.035


@dataclass(frozen=True)
class Part:
    """Render primitive in an object's local frame."""

    shape: str  # box | cylinder | ball
    offset: tuple
    size: tuple  # box: (sx, sy, sz); cylinder: (r, h); ball: (r,)
    color: tuple


@dataclass(eq=False)
class WorldObject:
    name: str
    pose: np.ndarray
    parts: tuple
    graspable: bool = False
    attach_mode: str | None = None  # free | planar | revolute
    grasp_point: tuple = (0.0, 0.0, 0.0)  # local

    def grasp_world(self) -> np.ndarray:
        return geo.apply(self.pose, self.grasp_point)

    def primitives(self) -> list:
        out = []
        R = self.pose[:3, :3]
        yaw = geo.yaw_of(R)
        for k, p in enumerate(self.parts):
            c = geo.apply(self.pose, p.offset)
            name = self.name if k == 0 else f"{self.name}.{k}"
            if p.shape == "box":
                out.append(render.Box(name, c, np.array(p.size, float), yaw, p.color))
            elif p.shape == "cylinder":
                out.append(render.Cylinder(name, c, p.size[0], p.size[1], p.color))
            else:
                out.append(render.Ball(name, c, p.size[0], p.color))
        return out

    def describe(self) -> dict:
        return {
            "name": self.name,
            "parts": [{"shape": p.shape, "offset": list(p.offset), "size": list(p.size), "color": list(p.color)} for p in self.parts],
            "graspable": self.graspable,
            "attach_mode": self.attach_mode,
            "grasp_point": list(self.grasp_point),
        }

    @classmethod
    def from_description(cls, d: dict, pose) -> "WorldObject":
        parts = tuple(Part(p["shape"], tuple(p["offset"]), tuple(p["size"]), tuple(p["color"])) for p in d["parts"])
        return cls(d["name"], np.asarray(pose, float), parts, d["graspable"], d["attach_mode"], tuple(d["grasp_point"]))


@dataclass(frozen=True)
class TaskSpec:
    task_name: str
    goal_text: str
    x_range: tuple
    y_range: tuple
    yaw_range: tuple = (0.0, 0.0)
    params: dict = field(default_factory=dict)

    @property
    def bounds(self) -> tuple:
        return (*self.x_range, *self.y_range)


TASKS: dict[str, TaskSpec] = {
    "reach_target": TaskSpec(
        "reach_target", "reach the blue target", (0.40, 0.70), (-0.20, 0.20),
        params={"z_range": (0.12, 0.25), "tolerance": 0.02},
    ),
    "press_button": TaskSpec(
        "press_button", "press the orange button", (0.40, 0.70), (-0.20, 0.20), (0.0, math.pi / 2),
        params={"top": 0.09, "press_depth": 0.015, "press_radius": 0.02},
    ),
    "slide_block": TaskSpec(
        "slide_block", "slide the block to the {side} target", (0.45, 0.60), (-0.20, 0.20), (-math.pi / 4, math.pi / 4),
        params={"slide": 0.15, "target_half": 0.04, "height": 0.12},
    ),
    "lift_lid": TaskSpec(
        "lift_lid", "lift the lid off the saucepan", (0.385, 0.735), (-0.22, 0.22), (-math.pi / 4, math.pi / 4),
        params={"lift": 0.08, "xy_radius": 0.12, "transport": 0.12},
    ),
    "turn_knob": TaskSpec(
        "turn_knob", "turn the knob a quarter turn", (0.40, 0.70), (-0.20, 0.20), (0.0, math.pi / 2),
        params={"goal": math.pi / 2, "tolerance": math.radians(15.0)},
    ),
}


def get_task(name: str | TaskSpec) -> TaskSpec:
    if isinstance(name, TaskSpec):
        return name
    try:
        return TASKS[name]
    except KeyError:
        raise UnknownTask(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


@dataclass(eq=False)
class TaskWorld:
    task: TaskSpec
    arm: ArmModel
    config: JointConfig
    objects: dict
    seed: int
    table_bounds: tuple = TABLE_BOUNDS
    style: render.SceneStyle = field(default_factory=render.SceneStyle)
    attached: str | None = None
    attach_ref: np.ndarray | None = None  # object pose relative to EE, or planar/revolute reference
    knob_angle: float = 0.0
    pressed: bool = False
    goal: dict = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "TaskWorld":
        # arm, task and style are immutable and shared
        out = copy.copy(self)
        out.objects = {n: copy.copy(o) for n, o in self.objects.items()}
        out.goal = dict(self.goal)
        return out

    @property
    def ee_pose(self) -> np.ndarray:
        return kin.forward_kinematics(self.arm, self.config).ee

    def object_poses(self) -> dict:
        return {n: o.pose.copy() for n, o in self.objects.items()}

    def goal_text(self) -> str:
        return self.task.goal_text.format(**self.goal)


# --- pose sampling -------------------------------------------------------


def _grid_dims(n: int) -> tuple[int, int]:
    best = (1, n)
    for r in range(1, int(math.isqrt(n)) + 1):
        if n % r == 0:
            best = (r, n // r)
    return best


def sample_pose_grid(bounds, yaw_range, n_demos: int) -> list[tuple[float, float, float]]:
    """Regular grid of (x, y, yaw) covering ``bounds`` at cell centres.

    Grid dimensions are the factor pair of ``n_demos`` closest to square,
    with the larger count along the longer side. Yaw is spaced linearly at
    the same cell-centre fractions.
    """
    if n_demos < 1:
        raise ValueError("n_demos must be >= 1")
    x0, x1, y0, y1 = bounds
    a, b = _grid_dims(n_demos)
    nx, ny = (a, b) if (x1 - x0) < (y1 - y0) else (b, a)
    xs = x0 + (np.arange(nx) + 0.5) / nx * (x1 - x0)
    ys = y0 + (np.arange(ny) + 0.5) / ny * (y1 - y0)
    lo, hi = yaw_range
    out = []
    for k in range(n_demos):
        i, j = divmod(k, ny)
        yaw = lo + (k + 0.5) / n_demos * (hi - lo)
        out.append((float(xs[i]), float(ys[j]), float(yaw)))
    return out


# --- reset ---------------------------------------------------------------


def _pose(x, y, z, yaw=0.0) -> np.ndarray:
    return geo.transform(geo.rot_z(yaw), (x, y, z))


def _sample(task: TaskSpec, rng: np.random.Generator) -> tuple[float, float, float]:
    x = float(rng.uniform(*task.x_range))
    y = float(rng.uniform(*task.y_range))
    yaw = float(rng.uniform(*task.yaw_range)) if task.yaw_range[1] > task.yaw_range[0] else task.yaw_range[0]
    return x, y, yaw


def reset(
    task: str | TaskSpec,
    seed: int,
    arm: ArmModel | None = None,
    pose: tuple | None = None,
    style: render.SceneStyle | None = None,
) -> TaskWorld:
    """Seeded initial state; ``pose`` = (x, y, yaw) overrides the sampled placement."""
    task = get_task(task)
    if arm is None:
        from .config import default_setup

        arm = default_setup().arm
    rng = np.random.default_rng([int(seed), 0x5EED, list(TASKS).index(task.task_name)])
    x, y, yaw = _sample(task, rng) if pose is None else pose
    p = task.params
    objects: dict[str, WorldObject] = {}
    goal: dict = {}
    if task.task_name == "reach_target":
        z = float(rng.uniform(*p["z_range"]))
        objects["target"] = WorldObject("target", _pose(x, y, z), (Part("ball", (0, 0, 0), (0.02,), (60, 60, 200)),))
    elif task.task_name == "press_button":
        top = p["top"]
        objects["button"] = WorldObject(
            "button",
            _pose(x, y, 0.0, yaw),
            (
                Part("box", (0, 0, 0.03), (0.09, 0.09, 0.06), (100, 100, 110)),
                Part("cylinder", (0, 0, 0.06 + (top - 0.06) / 2), (0.025, top - 0.06), (230, 120, 40)),
            ),
            grasp_point=(0.0, 0.0, top),
        )
    elif task.task_name == "slide_block":
        h = p["height"]
        side = "left" if y < 0 else "right"
        ty = y + p["slide"] if y < 0 else y - p["slide"]
        goal = {"side": side, "target": (x, ty)}
        objects["target_pad"] = WorldObject(
            "target_pad", _pose(x, ty, 0.0), (Part("box", (0, 0, 0.002), (2 * p["target_half"], 2 * p["target_half"], 0.004), (90, 160, 210)),)
        )
        objects["block"] = WorldObject(
            "block",
            _pose(x, y, 0.0, yaw),
            (Part("box", (0, 0, h / 2), (0.05, 0.05, h), (40, 90, 200)),),
            graspable=True,
            attach_mode="planar",
            grasp_point=(0.0, 0.0, h - 0.02),
        )
    elif task.task_name == "lift_lid":
        objects["pan"] = WorldObject("pan", _pose(x, y, 0.0, yaw), (Part("cylinder", (0, 0, 0.035), (0.09, 0.07), (70, 70, 80)),))
        objects["lid"] = WorldObject(
            "lid",
            _pose(x, y, 0.0775, yaw),
            (
                Part("cylinder", (0, 0, 0.0), (0.095, 0.015), (150, 150, 160)),
                Part("cylinder", (0, 0, 0.0225), (0.015, 0.03), (200, 60, 160)),
            ),
            graspable=True,
            attach_mode="free",
            grasp_point=(0.0, 0.0, 0.03),
        )
        goal = {"rest_z": 0.0775, "pan_xy": (x, y)}
    elif task.task_name == "turn_knob":
        objects["knob"] = WorldObject(
            "knob",
            _pose(x, y, 0.0, yaw),
            (
                Part("cylinder", (0, 0, 0.04), (0.03, 0.08), (200, 200, 60)),
                Part("box", (0.02, 0, 0.0825), (0.04, 0.012, 0.005), (200, 60, 160)),
            ),
            graspable=True,
            attach_mode="revolute",
            grasp_point=(0.0, 0.0, 0.085),
        )
        goal = {"start_yaw": yaw}
    return TaskWorld(task, arm, arm.home_config(), objects, int(seed), style=style or render.SceneStyle(), goal=goal)


# --- stepping ------------------------------------------------------------


def _ee_yaw(ee: np.ndarray) -> float:
    return geo.yaw_of(ee[:3, :3])


def _update_attached(world: TaskWorld, ee: np.ndarray) -> None:
    if world.attached is None:
        return
    obj = world.objects[world.attached]
    ref = world.attach_ref
    if obj.attach_mode == "free":
        obj.pose = ee @ ref
    elif obj.attach_mode == "planar":
        ee_xy, ee_yaw0, obj_xy, obj_yaw0 = ref[:2], ref[2], ref[3:5], ref[5]
        dyaw = geo.wrap_angle(_ee_yaw(ee) - ee_yaw0)
        pose = obj.pose.copy()
        pose[:2, 3] = obj_xy + (ee[:2, 3] - ee_xy)
        pose[:3, :3] = geo.rot_z(obj_yaw0 + dyaw)
        obj.pose = pose
    elif obj.attach_mode == "revolute":
        ee_yaw0, angle0, obj_yaw0 = ref
        # Turning about world -z (clockwise from above) counts positive.
        delta = -geo.wrap_angle(_ee_yaw(ee) - ee_yaw0)
        world.knob_angle = float(angle0 + delta)
        pose = obj.pose.copy()
        pose[:3, :3] = geo.rot_z(obj_yaw0 - delta)
        obj.pose = pose


def _attach_ref(world: TaskWorld, obj: WorldObject, ee: np.ndarray) -> np.ndarray:
    if obj.attach_mode == "free":
        return geo.invert(ee) @ obj.pose
    if obj.attach_mode == "planar":
        return np.array([ee[0, 3], ee[1, 3], _ee_yaw(ee), obj.pose[0, 3], obj.pose[1, 3], geo.yaw_of(obj.pose[:3, :3])])
    return np.array([_ee_yaw(ee), world.knob_angle, geo.yaw_of(obj.pose[:3, :3])])


def step(world: TaskWorld, q_cmd: JointConfig) -> TaskWorld:
    """Advance one control step toward ``q_cmd``; returns a new world."""
    q_target = kin.check_limits(world.arm, q_cmd.q)
    out = world.copy()
    q = out.config.q
    delta = q_target - q
    rate = out.arm.rate_limit
    if np.all(np.abs(delta) <= rate * (1 + 1e-12)):
        q_new = q_target
    else:
        q_new = q + np.clip(delta, -rate, rate)
    was_open = out.config.gripper == OPEN
    out.config = JointConfig(q_new, q_cmd.gripper)
    ee = kin.forward_kinematics(out.arm, out.config).ee
    _update_attached(out, ee)
    if was_open and q_cmd.gripper == CLOSED and out.attached is None:
        best, best_d = None, GRASP_DISTANCE
        for obj in out.objects.values():
            if obj.graspable:
                d = float(np.linalg.norm(obj.grasp_world() - ee[:3, 3]))
                if d <= best_d:
                    best, best_d = obj, d
        if best is not None:
            out.attached = best.name
            out.attach_ref = _attach_ref(out, best, ee)
    elif not was_open and q_cmd.gripper == OPEN and out.attached is not None:
        out.attached = None
        out.attach_ref = None
    if out.task.task_name == "press_button" and not out.pressed:
        p = out.task.params
        top = out.objects["button"].grasp_world()
        d_xy = float(np.linalg.norm(ee[:2, 3] - top[:2]))
        if d_xy <= p["press_radius"] and ee[2, 3] <= top[2] + p["press_depth"]:
            out.pressed = True
    out.t += 1
    return out


# --- success -------------------------------------------------------------


def check_success(task: str | TaskSpec, world: TaskWorld) -> int:
    task = get_task(task)
    p = task.params
    name = task.task_name
    if name == "reach_target":
        ee = kin.forward_kinematics(world.arm, world.config).ee[:3, 3]
        ok = np.linalg.norm(ee - world.objects["target"].pose[:3, 3]) < p["tolerance"]
    elif name == "press_button":
        ok = world.pressed
    elif name == "slide_block":
        tx, ty = world.goal["target"]
        b = world.objects["block"].pose[:3, 3]
        ok = abs(b[0] - tx) < p["target_half"] and abs(b[1] - ty) < p["target_half"]
    elif name == "lift_lid":
        lid = world.objects["lid"].pose[:3, 3]
        ok = lid[2] > world.goal["rest_z"] + p["lift"] and np.linalg.norm(lid[:2] - np.asarray(world.goal["pan_xy"])) < p["xy_radius"]
    else:
        ok = abs(geo.wrap_angle(world.knob_angle - p["goal"])) <= p["tolerance"]
    return 100 if ok else 0


# --- scripted expert -----------------------------------------------------


def down_constraints(point) -> list[kin.PointConstraint]:
    """EE at ``point`` with its approach (z) axis pointing straight down."""
    point = np.asarray(point, float)
    return [
        kin.PointConstraint(kin.EE_FRAME, point),
        kin.PointConstraint(kin.EE_FRAME, point + np.array([0.0, 0.0, 0.2]), offset=np.array([0.0, 0.0, -0.2])),
    ]


def ik_down(arm: ArmModel, seed_cfg: JointConfig, point) -> JointConfig:
    try:
        return kin.solve_ik(arm, seed_cfg, down_constraints(point)).config
    except NonConvergent as exc:
        raise ExpertFailure(f"no IK solution for EE at {np.round(point, 3).tolist()}: {exc}") from None


def _segment(arm: ArmModel, a: JointConfig, b: JointConfig) -> list[JointConfig]:
    span = float(np.max(np.abs(b.q - a.q)))
    n = max(3, math.ceil(span / (EXPERT_SPEED * arm.rate_limit)))
    out = kin.interpolate_joints(a, b.with_gripper(a.gripper), n)
    return out


def _hold(cfg: JointConfig, gripper: str) -> list[JointConfig]:
    return [cfg.with_gripper(gripper)] * GRIPPER_HOLD


def _keyposes(world: TaskWorld) -> list[tuple]:
    """Remaining waypoints from the current state: ('move', point) / ('grip', state) / ('turn', rad)."""
    name = world.task.task_name
    p = world.task.params
    if name == "reach_target":
        return [("move", world.objects["target"].pose[:3, 3])]
    if name == "press_button":
        if world.pressed:
            return []
        top = world.objects["button"].grasp_world()
        return [("move", top + [0, 0, 0.10]), ("move", top + [0, 0, 0.005])]
    if name == "slide_block":
        blk = world.objects["block"]
        g = blk.grasp_world()
        tx, ty = world.goal["target"]
        dest = np.array([tx, ty, g[2]])
        if world.attached == "block":
            return [("move", dest), ("grip", OPEN), ("move", dest + [0, 0, 0.08])]
        if check_success(world.task, world):
            return []
        return [("move", g + [0, 0, 0.08]), ("move", g), ("grip", CLOSED), ("move", dest), ("grip", OPEN), ("move", dest + [0, 0, 0.08])]
    if name == "lift_lid":
        lid = world.objects["lid"]
        if world.attached == "lid":
            rest = world.goal["rest_z"] + lid.grasp_point[2]
            return [("move", np.array([*world.goal["pan_xy"], rest + p["transport"]]))]
        if check_success(world.task, world):
            return []
        g = lid.grasp_world()
        return [("move", g + [0, 0, 0.08]), ("move", g), ("grip", CLOSED), ("move", g + [0, 0, p["transport"]])]
    # turn_knob
    knob = world.objects["knob"]
    g = knob.grasp_world()
    if world.attached == "knob":
        return [("turn", p["goal"] - world.knob_angle), ("grip", OPEN)]
    if check_success(world.task, world):
        return []
    return [("move", g + [0, 0, 0.08]), ("move", g), ("grip", CLOSED), ("turn", p["goal"] - world.knob_angle), ("grip", OPEN)]


def plan(world: TaskWorld) -> list[JointConfig]:
    """Dense joint-space plan (one config per control step) from the current state.

    Raises ExpertFailure when a waypoint has no IK solution.
    """
    arm = world.arm
    cur = world.config
    ee = kin.forward_kinematics(arm, cur).ee[:3, 3]
    out: list[JointConfig] = []
    keys = _keyposes(world)
    # resume after the furthest leading move already reached
    lead = 0
    while lead < len(keys) and keys[lead][0] == "move":
        lead += 1
    for j in range(lead - 1, -1, -1):
        if np.linalg.norm(np.asarray(keys[j][1], float) - ee) < SKIP_DISTANCE:
            keys = keys[j + 1 :]
            break
    for kind, arg in keys:
        if kind == "move":
            target = np.asarray(arg, float)
            if np.linalg.norm(target - ee) < SKIP_DISTANCE:
                continue
            nxt = ik_down(arm, cur, target)
            out += _segment(arm, cur, nxt)
            cur, ee = nxt, target
        elif kind == "grip":
            if cur.gripper != arg:
                out += _hold(cur, arg)
                cur = cur.with_gripper(arg)
        else:
            if abs(arg) < math.radians(1.0):
                continue
            q = cur.q.copy()
            q[6] += arg
            if q[6] > arm.limits[6, 1] or q[6] < arm.limits[6, 0]:
                raise ExpertFailure("wrist turn exceeds joint 7 limits")
            nxt = cur.with_q(q)
            out += _segment(arm, cur, nxt)
            cur = nxt
    return out


def target_at_horizon(world: TaskWorld, K: int, plan_steps: Sequence[JointConfig] | None = None) -> JointConfig:
    """Expert configuration K steps ahead, holding at gripper changes.

    A gripper switch inside the horizon is not drawn directly: the target
    first stops at the last configuration before the switch, and once the
    arm is there the switch itself is drawn at the current pose.
    """
    steps = plan(world) if plan_steps is None else list(plan_steps)
    if not steps:
        return world.config
    g0 = world.config.gripper
    e = next((i for i, c in enumerate(steps) if c.gripper != g0), None)
    if e is None:
        return steps[min(K, len(steps)) - 1]
    if e == 0:
        return world.config.with_gripper(steps[0].gripper)
    return steps[min(K, e) - 1]


@dataclass(frozen=True, eq=False)
class DemoStep:
    t: int
    config: JointConfig
    object_poses: dict
    ee_pose: np.ndarray
    view_refs: dict = field(default_factory=dict)


@dataclass(eq=False)
class DemoRecord:
    task_name: str
    goal_text: str
    seed: int
    steps: list
    objects: list  # static object descriptions
    table_bounds: tuple = TABLE_BOUNDS

    def __len__(self) -> int:
        return len(self.steps)


def _demo_step(world: TaskWorld) -> DemoStep:
    return DemoStep(world.t, world.config, world.object_poses(), world.ee_pose.copy())


def scripted_expert(task: str | TaskSpec, world: TaskWorld) -> DemoRecord:
    """Roll out the waypoint expert from ``world``; the demo must end in success."""
    task = get_task(task)
    steps = [_demo_step(world)]
    for cfg in plan(world):
        world = step(world, cfg)
        steps.append(_demo_step(world))
    if check_success(task, world) != 100:
        raise ExpertFailure(f"expert rollout did not solve {task.task_name} (seed {world.seed})")
    objs = [o.describe() for o in world.objects.values()]
    return DemoRecord(task.task_name, world.goal_text(), world.seed, steps, objs, world.table_bounds)


def solvable_reset(task, seed: int, arm: ArmModel | None = None, max_tries: int = 20, **kw) -> tuple[TaskWorld, DemoRecord]:
    """Reset and sanity-check with the expert, reseeding on failure."""
    last = None
    for k in range(max_tries):
        s = int(seed) if k == 0 else int(seed) * 1000 + k
        world = reset(task, s, arm, **kw)
        try:
            return world, scripted_expert(task, world)
        except ExpertFailure as exc:
            last = exc
    raise ExpertFailure(f"no solvable episode after {max_tries} seeds: {last}")


# --- scene construction --------------------------------------------------


def arm_capsules(arm: ArmModel, poses: kin.FramePoses) -> list:
    pts = [np.array([arm.base_pose[0, 3], arm.base_pose[1, 3], 0.0]), arm.base_pose[:3, 3]]
    pts += [poses.position(i) for i in range(kin.EE_FRAME + 1)]
    caps, prev = [], pts[0]
    color = render.DEFAULT_PALETTE.arm_body
    for p in pts[1:]:
        if np.linalg.norm(p - prev) > 1e-6:
            caps.append(render.Capsule(prev.copy(), p.copy(), LINK_RADIUS, color, name="arm"))
            prev = p
    return caps


def make_scene(
    arm: ArmModel,
    config: JointConfig,
    objects: Sequence[WorldObject],
    style: render.SceneStyle,
    spheres: Sequence[render.SphereTarget] = (),
    table_bounds: tuple = TABLE_BOUNDS,
) -> render.Scene:
    poses = kin.forward_kinematics(arm, config)
    prims = [p for o in objects for p in o.primitives()]
    return render.Scene(prims, arm_capsules(arm, poses), list(spheres), style, table_bounds)


def sphere_targets(
    arm: ArmModel, target: JointConfig, radius: float, stripes: bool = True
) -> list[render.SphereTarget]:
    """Target spheres for the four sphere joints of ``target``."""
    out = []
    for name, sp in kin.sphere_poses(arm, target).items():
        out.append(
            render.SphereTarget(
                name, sp.center, radius, sp.axis, sp.spin, stripes, target.gripper if name == "gripper" else None
            )
        )
    return out


def render_views(
    arm: ArmModel,
    rig: CameraRig,
    config: JointConfig,
    objects: Sequence[WorldObject],
    style: render.SceneStyle,
    target: JointConfig | None = None,
    stripes: bool = True,
    palette: render.Palette = render.DEFAULT_PALETTE,
    table_bounds: tuple = TABLE_BOUNDS,
) -> tuple[list[render.ViewImage], list[render.ViewLayers]]:
    """Observation views for ``config``, optionally with target spheres for ``target``.

    The rendering rig includes any camera perturbation stored in ``style``.
    """
    cam_rig = rig.with_offsets(style.camera_offsets) if style.camera_offsets else rig
    ee = kin.forward_kinematics(arm, config).ee
    cams = rig_world_poses(cam_rig, ee)
    views, layers = [], []
    for name in VIEW_ORDER:
        cam = cam_rig[name]
        spheres = sphere_targets(arm, target, cam.sphere_radius, stripes) if target is not None else []
        scene = make_scene(arm, config, objects, style, spheres, table_bounds)
        L = render.render_layers(scene, cams[name], cam.intrinsics, palette)
        layers.append(L)
        views.append(render.ViewImage(name, L.composite(), L.mask))
    return views, layers


def demo_objects(demo: DemoRecord, k: int) -> list[WorldObject]:
    st = demo.steps[k]
    return [WorldObject.from_description(d, st.object_poses[d["name"]]) for d in demo.objects]


# --- demo serialization --------------------------------------------------


def _mat(T) -> list:
    return np.asarray(T, float).round(12).tolist()


def write_demo(demo: DemoRecord, path: str | Path) -> None:
    """JSON lines: a versioned header, then one record per step."""
    header = {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "task": demo.task_name,
        "goal_text": demo.goal_text,
        "seed": demo.seed,
        "table_bounds": list(demo.table_bounds),
        "objects": demo.objects,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for st in demo.steps:
        rec = {
            "t": st.t,
            "q": [float(x) for x in st.config.q],
            "gripper": st.config.gripper,
            "ee_pose": _mat(st.ee_pose),
            "objects": {n: _mat(T) for n, T in st.object_poses.items()},
            "views": dict(st.view_refs),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write demo {path}: {exc}") from None


def read_demo(path: str | Path) -> DemoRecord:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read demo {path}: {exc}") from None
    if not lines:
        raise EmptyDemo(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != DEMO_FORMAT or header.get("version") != DEMO_VERSION:
        raise IoFailure(f"{path}: unsupported demo format {header.get('format')} v{header.get('version')}")
    steps = []
    for line in lines[1:]:
        r = json.loads(line)
        steps.append(
            DemoStep(
                r["t"],
                JointConfig(np.array(r["q"]), r["gripper"]),
                {n: np.array(T) for n, T in r["objects"].items()},
                np.array(r["ee_pose"]),
                r.get("views", {}),
            )
        )
    return DemoRecord(header["task"], header["goal_text"], header["seed"], steps, header["objects"], tuple(header["table_bounds"]))
