"""The closed loop: observe, draw targets, decode, chunk, execute."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import control, decode, render
from . import simworld as sw
from .camera import VIEW_ORDER, CameraRig, rig_world_poses
from .errors import BadTargetImage, DrawerTimeout, IoFailure, JointCanvasError, ConfigError
from .kinematics import JointConfig, forward_kinematics

DEFAULT_TIMEOUT_S = 30.0
TIMEOUT_ENV = "JOINTCANVAS_DRAWER_TIMEOUT_S"
REACHED_TOLERANCE = math.radians(3.0)
DEFAULT_BUDGET = 400


@dataclass(frozen=True, eq=False)
class TargetImageSet:
    tiled: render.TiledImage
    provenance: str  # oracle | noisy | external
    latency: float = 0.0
    # Oracle sets keep what a re-render needs; drawers downstream may use it.
    layers: tuple = ()
    spheres: tuple = ()  # per view: list of SphereTarget
    cam_poses: dict = field(default_factory=dict)
    intrinsics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in ("oracle", "noisy", "external"):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class NoiseSpec:
    blur_sigma: float = 0.0  # px
    jitter_px: float = 0.0
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    per_view_independent: bool = False
    color_jitter: float = 0.0  # max per-channel offset, 0-255 scale

    def __post_init__(self):
        for name in ("drop_prob", "dup_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("blur_sigma", "jitter_px", "color_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def is_identity(self) -> bool:
        return not (self.blur_sigma or self.jitter_px or self.drop_prob or self.dup_prob or self.color_jitter)

    KEYS = {"blur": "blur_sigma", "jitter": "jitter_px", "drop": "drop_prob", "dup": "dup_prob", "color": "color_jitter", "independent": "per_view_independent"}

    @classmethod
    def parse(cls, text: str) -> "NoiseSpec":
        """Parse ``jitter=4,drop=0.1,dup=0.2,blur=1,color=10,independent=1``."""
        kw = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            if "=" not in item:
                raise ConfigError(f"noise spec item {item!r} is not key=value")
            k, v = (s.strip() for s in item.split("=", 1))
            if k not in cls.KEYS:
                raise ConfigError(f"unknown noise key {k!r}; known: {sorted(cls.KEYS)}")
            field_name = cls.KEYS[k]
            try:
                kw[field_name] = v.lower() in ("1", "true", "yes") if field_name == "per_view_independent" else float(v)
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        try:
            return cls(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def format(self) -> str:
        inv = {v: k for k, v in self.KEYS.items()}
        return ",".join(f"{inv[f]}={int(getattr(self, f)) if f == 'per_view_independent' else getattr(self, f):g}" for f in inv)


# --- drawers -------------------------------------------------------------


def oracle_draw(
    world: sw.TaskWorld,
    q_target: JointConfig,
    rig: CameraRig,
    palette: render.Palette = render.DEFAULT_PALETTE,
    stripes: bool = True,
) -> TargetImageSet:
    """Current observation with spheres at the sphere joints of ``q_target``."""
    t0 = time.perf_counter()
    views, layers = sw.render_views(
        world.arm, rig, world.config, list(world.objects.values()), world.style, q_target, stripes, palette, world.table_bounds
    )
    cam_rig = rig.with_offsets(world.style.camera_offsets) if world.style.camera_offsets else rig
    poses = rig_world_poses(cam_rig, world.ee_pose)
    spheres = tuple(tuple(sw.sphere_targets(world.arm, q_target, cam_rig[n].sphere_radius, stripes)) for n in VIEW_ORDER)
    return TargetImageSet(
        render.tile(views),
        "oracle",
        time.perf_counter() - t0,
        tuple(layers),
        spheres,
        poses,
        {n: cam_rig[n].intrinsics for n in VIEW_ORDER},
    )


def _offset_perpendicular(rng, cam_pose, center, sigma_px, fx) -> np.ndarray:
    """3D offset in the image plane at the sphere's depth, std ``sigma_px`` pixels."""
    depth = max(float((center - cam_pose[:3, 3]) @ cam_pose[:3, 2]), 1e-3)
    du, dv = rng.normal(0.0, sigma_px * depth / fx, 2)
    return du * cam_pose[:3, 0] + dv * cam_pose[:3, 1]


def _ghost_offset(rng, scale: float) -> np.ndarray:
    d = rng.normal(size=3)
    return d / np.linalg.norm(d) * scale * rng.uniform(1.0, 1.6)


def _mean_depth(oracle: TargetImageSet, center) -> tuple[float, float]:
    depths, fxs = [], []
    for n in VIEW_ORDER:
        P = oracle.cam_poses[n]
        z = float((center - P[:3, 3]) @ P[:3, 2])
        if z > 0:
            depths.append(z)
            fxs.append(oracle.intrinsics[n].fx)
    return (float(np.mean(depths)), float(np.mean(fxs))) if depths else (1.0, 221.0)


def noisy_draw(oracle: TargetImageSet, spec: NoiseSpec, seed: int, palette: render.Palette = render.DEFAULT_PALETTE) -> TargetImageSet:
    """Seeded corruption of an oracle target set.

    With ``per_view_independent`` each quadrant gets its own sub-seed and 2D
    corruption, so views disagree (the non-tiled failure model). Otherwise
    corruption is drawn once in 3D and shows up consistently in every view.
    """
    if spec.is_identity:
        return replace(oracle, provenance="noisy")
    if not oracle.layers:
        raise ValueError("noisy_draw needs an oracle set that carries its render layers")
    t0 = time.perf_counter()
    per_view_spheres: list[list[render.SphereTarget]] = []
    if not spec.per_view_independent:
        rng = np.random.default_rng([seed, 0x7117])
        base = oracle.spheres[0]
        shifts, keep, ghosts = [], [], []
        for sp in base:
            depth, fx = _mean_depth(oracle, sp.center)
            shifts.append(rng.normal(0.0, spec.jitter_px * depth / fx, 3) if spec.jitter_px else np.zeros(3))
            keep.append(rng.random() >= spec.drop_prob)
            ghosts.append(_ghost_offset(rng, 40.0 * depth / fx) if rng.random() < spec.dup_prob else None)
        for vi, name in enumerate(VIEW_ORDER):
            out = []
            for k, sp in enumerate(oracle.spheres[vi]):
                if not keep[k]:
                    continue
                moved = replace(sp, center=sp.center + shifts[k])
                out.append(moved)
                if ghosts[k] is not None:
                    out.append(replace(sp, center=moved.center + ghosts[k]))
            per_view_spheres.append(out)
    else:
        for vi, name in enumerate(VIEW_ORDER):
            rng = np.random.default_rng([seed, 0x7117, vi + 1])
            P, fx = oracle.cam_poses[name], oracle.intrinsics[name].fx
            out = []
            for sp in oracle.spheres[vi]:
                shift = _offset_perpendicular(rng, P, sp.center, spec.jitter_px, fx) if spec.jitter_px else np.zeros(3)
                kept = rng.random() >= spec.drop_prob
                dup = rng.random() < spec.dup_prob
                ghost = _offset_perpendicular(rng, P, sp.center, 1.0, fx) if dup else None
                if not kept:
                    continue
                moved = replace(sp, center=sp.center + shift)
                out.append(moved)
                if ghost is not None:
                    g = ghost / max(np.linalg.norm(ghost), 1e-12)
                    depth = max(float((sp.center - P[:3, 3]) @ P[:3, 2]), 1e-3)
                    out.append(replace(sp, center=moved.center + g * 40.0 * depth / fx * rng.uniform(1.0, 1.6)))
            per_view_spheres.append(out)
    views = []
    for vi, name in enumerate(VIEW_ORDER):
        scene_layer = oracle.layers[vi].scene
        sc = render.Scene(spheres=per_view_spheres[vi])
        L = render.render_layers(sc, oracle.cam_poses[name], oracle.intrinsics[name], palette, draw_scene=False)
        px = scene_layer.copy()
        px[L.mask] = L.spheres[L.mask]
        views.append(px)
    rngs = [np.random.default_rng([seed, 0xC0105, vi + 1 if spec.per_view_independent else 0]) for vi in range(4)]
    out_views = []
    for vi, px in enumerate(views):
        img = px.astype(float)
        if spec.color_jitter:
            img += rngs[vi].uniform(-spec.color_jitter, spec.color_jitter, 3)
        if spec.blur_sigma:
            img = ndimage.gaussian_filter(img, sigma=(spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
        out_views.append(render.ViewImage(VIEW_ORDER[vi], np.clip(np.round(img), 0, 255).astype(np.uint8)))
    return replace(oracle, tiled=render.tile(out_views), provenance="noisy", latency=oracle.latency + time.perf_counter() - t0)


def drawer_timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw is None:
        return DEFAULT_TIMEOUT_S
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{TIMEOUT_ENV} must be a number, got {raw!r}") from None


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def external_draw(
    exchange_dir: str | Path,
    condition: render.TiledImage,
    prompt: str,
    timeout: float | None = None,
    seq: int = 0,
    state: dict | None = None,
    poll_interval: float = 0.01,
) -> TargetImageSet:
    """Hand a condition image to an out-of-process drawer and wait for its target.

    Writes ``{seq:06}_cond.png`` and ``{seq:06}_prompt.txt`` (plus an optional
    ``{seq:06}_state.json`` world snapshot) and polls for ``{seq:06}_target.png``.
    """
    d = Path(exchange_dir)
    if not d.is_dir():
        raise IoFailure(f"exchange directory {d} does not exist")
    timeout = drawer_timeout() if timeout is None else timeout
    t0 = time.perf_counter()
    stem = f"{seq:06d}"
    try:
        if state is not None:
            _atomic_write(d / f"{stem}_state.json", json.dumps(state, sort_keys=True).encode())
        _atomic_write(d / f"{stem}_prompt.txt", prompt.encode("utf-8"))
        tmp = d / f"{stem}_cond.png.part"
        render.write_png(tmp, condition.pixels)
        os.replace(tmp, d / f"{stem}_cond.png")
    except OSError as exc:
        raise IoFailure(f"cannot write to exchange directory {d}: {exc}") from None
    target = d / f"{stem}_target.png"
    deadline = time.monotonic() + timeout
    while not target.exists():
        if time.monotonic() >= deadline:
            raise DrawerTimeout(f"no target for sequence {seq} after {timeout:g} s", seq)
        time.sleep(poll_interval)
    try:
        px = render.read_png(target)
    except IoFailure as exc:
        raise BadTargetImage(f"sequence {seq}: {exc}") from None
    if px.shape != (render.TILE_SIZE, render.TILE_SIZE, 3):
        raise BadTargetImage(f"sequence {seq}: target is {px.shape[1]}x{px.shape[0]}, expected 512x512 RGB")
    return TargetImageSet(render.TiledImage(px), "external", time.perf_counter() - t0)


# --- world snapshots for out-of-process drawers --------------------------


def world_state(world: sw.TaskWorld, extra: dict | None = None) -> dict:
    st = {
        "task": world.task.task_name,
        "seed": world.seed,
        "t": world.t,
        "config": world.config.to_json(),
        "objects": {n: o.pose.tolist() for n, o in world.objects.items()},
        "attached": world.attached,
        "attach_ref": None if world.attach_ref is None else np.asarray(world.attach_ref).tolist(),
        "knob_angle": world.knob_angle,
        "pressed": world.pressed,
    }
    st.update(extra or {})
    return st


def restore_world(state: dict, arm=None, style: render.SceneStyle | None = None) -> sw.TaskWorld:
    world = sw.reset(state["task"], state["seed"], arm, style=style)
    world.t = state["t"]
    world.config = JointConfig.from_json(state["config"])
    for n, T in state["objects"].items():
        world.objects[n].pose = np.array(T)
    world.attached = state["attached"]
    world.attach_ref = None if state["attach_ref"] is None else np.array(state["attach_ref"])
    world.knob_angle = state["knob_angle"]
    world.pressed = state["pressed"]
    return world


# --- drawer objects ------------------------------------------------------


@dataclass
class OracleDrawer:
    K: int = 20
    stripes: bool = True
    palette: render.Palette = render.DEFAULT_PALETTE

    name = "oracle"

    def draw(self, world: sw.TaskWorld, rig: CameraRig, seq: int, seed: int) -> TargetImageSet:
        target = sw.target_at_horizon(world, self.K)
        return oracle_draw(world, target, rig, self.palette, self.stripes)


@dataclass
class NoisyDrawer(OracleDrawer):
    spec: NoiseSpec = NoiseSpec()

    name = "noisy"

    def draw(self, world, rig, seq, seed):
        oracle = super().draw(world, rig, seq, seed)
        return noisy_draw(oracle, self.spec, int(np.random.default_rng([seed, seq]).integers(1 << 31)), self.palette)


@dataclass
class ExternalDrawer:
    exchange_dir: str
    timeout: float | None = None
    K: int = 20
    stripes: bool = True
    perturbation: dict | None = None

    name = "external"

    def __post_init__(self):
        self._seq = None

    def _next_seq(self) -> int:
        # The exchange sequence runs across episodes and drawers sharing the
        # directory, so a new drawer never picks up an earlier target.
        if self._seq is None:
            stems = [p.name.split("_", 1)[0] for p in Path(self.exchange_dir).glob("*_cond.png")]
            self._seq = max((int(x) for x in stems if x.isdigit()), default=-1) + 1
        s = self._seq
        self._seq += 1
        return s

    def draw(self, world, rig, seq, seed):
        s = self._next_seq()
        views, _ = sw.render_views(world.arm, rig, world.config, list(world.objects.values()), world.style, None, True, table_bounds=world.table_bounds)
        extra = {"K": self.K, "stripes": self.stripes, "perturbation": self.perturbation}
        return external_draw(self.exchange_dir, render.tile(views), world.goal_text(), self.timeout, s, world_state(world, extra))


def parse_drawer(spec: str, K: int = 20, stripes: bool = True):
    """``oracle`` | ``noisy:<noise spec>`` | ``external:<dir>``."""
    kind, _, arg = spec.partition(":")
    if kind == "oracle" and not arg:
        return OracleDrawer(K, stripes)
    if kind == "noisy":
        return NoisyDrawer(K, stripes, spec=NoiseSpec.parse(arg))
    if kind == "external" and arg:
        return ExternalDrawer(arg, K=K, stripes=stripes)
    raise ConfigError(f"drawer spec {spec!r} must be oracle, noisy:<spec> or external:<dir>")


# --- episodes ------------------------------------------------------------


@dataclass(frozen=True)
class ControllerConfig:
    mode: str = "absolute"
    K: int = 20
    H: int = 20
    sigma: float = 0.0  # actuation noise, rad
    ensemble_m: float = 0.0
    ensemble: bool = False
    fixed_interval: bool = False

    def __post_init__(self):
        control.normalize_mode(self.mode)
        if self.K < 1 or not 1 <= self.H <= self.K:
            raise ValueError(f"need K >= 1 and 1 <= H <= K, got K={self.K}, H={self.H}")
        if self.ensemble_m < 0:
            raise ValueError("ensemble m must be >= 0")


@dataclass(eq=False)
class EpisodeResult:
    task: str
    seed: int
    success: int
    steps: int
    terminal_joint_error: float
    queries: int
    cause: str | None = None
    log: list = field(default_factory=list)

    @property
    def mean_decode_residual(self) -> float:
        r = [e["fit_residual"] for e in self.log if e.get("fit_residual") is not None]
        return float(np.mean(r)) if r else float("nan")

    def summary(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "success": self.success,
            "steps": self.steps,
            "terminal_joint_error": self.terminal_joint_error,
            "queries": self.queries,
            "cause": self.cause,
        }


def run_episode(
    task,
    drawer,
    controller: ControllerConfig = ControllerConfig(),
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    fixed_interval: bool | None = None,
    rig: CameraRig | None = None,
    arm=None,
    style: render.SceneStyle | None = None,
    world: sw.TaskWorld | None = None,
    palette: render.Palette = render.DEFAULT_PALETTE,
) -> EpisodeResult:
    """Closed loop until success or the step budget runs out.

    Drawer and decoder errors end the episode as a failure with the error
    class recorded as ``cause``. The decoder always uses the nominal rig.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    from .config import default_setup

    setup = default_setup()
    rig = rig or setup.rig
    arm = arm or setup.arm
    task = sw.get_task(task)
    fixed = controller.fixed_interval if fixed_interval is None else fixed_interval
    if world is None:
        world = sw.reset(task, seed, arm, style=style)
    rng = np.random.default_rng([seed, 0xAC7])
    ens = control.EnsembleConfig(controller.ensemble_m, controller.ensemble)
    steps = 0
    seq = 0
    log: list[dict] = []
    cause = None
    last_target = world.config
    stop = lambda w: sw.check_success(task, w) == 100  # noqa: E731

    while steps < budget and not stop(world):
        t0 = time.perf_counter()
        try:
            drawn = drawer.draw(world, rig, seq, seed)
            t1 = time.perf_counter()
            dec = decode.decode_tiled(drawn.tiled, arm, rig, world.config, palette=palette)
        except JointCanvasError as exc:
            cause = type(exc).__name__
            log.append({"seq": seq, "t": steps, "error": cause, "message": str(exc)})
            break
        t2 = time.perf_counter()
        target = dec.q_target
        last_target = target
        entry = {
            "seq": seq,
            "t": steps,
            "draw_s": t1 - t0,
            "decode_s": t2 - t1,
            "fit_residual": dec.fit_residual,
            "dropped": dec.dropped,
            "missing": list(dec.missing),
            "gripper": dec.gripper_state,
            "target": [float(x) for x in target.q],
        }
        seq += 1
        try:
            while True:
                chunk = control.make_chunk(world.config, target, controller.K, controller.mode, arm)
                H = min(controller.H, budget - steps)
                if H < 1:
                    break
                world, slog = control.execute(
                    world, chunk, H, controller.sigma, rng, ensemble=ens if controller.mode != "delta" else None,
                    start_step=steps, stop=stop,
                )
                steps += len(slog)
                if not fixed or stop(world) or steps >= budget:
                    break
                if control.terminal_error(world, target) <= REACHED_TOLERANCE and world.config.gripper == target.gripper:
                    break
        except JointCanvasError as exc:
            cause = type(exc).__name__
            entry["error"] = cause
            log.append(entry)
            break
        entry["execute_s"] = time.perf_counter() - t2
        log.append(entry)
    success = sw.check_success(task, world)
    return EpisodeResult(
        task.task_name, int(seed), success, steps, control.terminal_error(world, last_target), seq, cause, log
    )
