"""CPU ray-cast renderer for scenes and striped joint-target spheres.

Target spheres are rendered as a separate layer that is depth-tested
against the table plane and against each other, then composited over the
scene render. This mirrors overlaying target renders onto recorded
observations: arm links and objects never hide a target.
"""

from __future__ import annotations

import hashlib
import math
from functools import lru_cache
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import geometry as geo
from .camera import VIEW_ORDER, Intrinsics, pixel_directions, to_camera
from .errors import IoFailure, UnknownCategory, WrongViewSet

VIEW_SIZE = 256
TILE_SIZE = 512
N_STRIPES = 6
POLE_CAP = 0.8
SPHERE_AMBIENT = 0.85
SCENE_AMBIENT = 0.55
LIGHT_DIR = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
SAFE_GRAY = np.array([128, 128, 128], dtype=np.uint8)

PERTURBATIONS = ("object_color", "distractors", "lighting", "table_texture", "background", "camera_pose")


def _hex(s: str) -> tuple[int, int, int]:
    s = s.lstrip("#")
    return int(s[0:2], 16), int(s[2:4], 16), int(s[4:6], 16)


@dataclass(frozen=True)
class Palette:
    base: tuple = _hex("#B22222")
    elbow: tuple = _hex("#228B22")
    wrist: tuple = _hex("#800080")
    gripper_open: tuple = _hex("#FFB300")
    gripper_closed: tuple = _hex("#00C8D7")
    pole: tuple = (255, 255, 255)
    arm_body: tuple = _hex("#808080")
    table: tuple = (150, 120, 90)
    backdrop: tuple = ((70, 80, 95), (165, 170, 180))
    detect_radius: float = 48.0

    # class name -> joint id; the two gripper classes share the gripper joint
    CLASSES = ("base", "elbow", "wrist", "gripper_open", "gripper_closed")

    def base_color(self, cls: str) -> np.ndarray:
        return np.array(getattr(self, cls), dtype=np.uint8)

    def stripe_color(self, cls: str) -> np.ndarray:
        return self.base_color(cls) // 2

    def class_for(self, joint_id: str, gripper_state: str | None = None) -> str:
        if joint_id == "gripper":
            return "gripper_closed" if gripper_state == "closed" else "gripper_open"
        return joint_id

    def marker_colors(self) -> tuple[np.ndarray, list[tuple[str, str]]]:
        """Every colour a target sphere can show, with (class, role) labels."""
        cols, labels = [], []
        for c in self.CLASSES:
            cols += [self.base_color(c), self.stripe_color(c)]
            labels += [(c, "base"), (c, "stripe")]
        cols.append(np.array(self.pole, dtype=np.uint8))
        labels.append(("pole", "pole"))
        return np.array(cols, dtype=np.int16), labels

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


DEFAULT_PALETTE = Palette()


def color_distance(pixels: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Max-channel distance, shape (..., n_colors)."""
    p = pixels.astype(np.int16)[..., None, :]
    return np.abs(p - colors.astype(np.int16)).max(axis=-1)


@lru_cache(maxsize=8)
def _unsafe_lut(palette: Palette, margin: float) -> np.ndarray:
    """Boolean 64^3 table over RGB cells of side 4, true if any colour in the
    cell lies within ``detect_radius + margin`` of a marker colour."""
    colors, _ = palette.marker_colors()
    limit = palette.detect_radius + margin
    lo = np.arange(0, 256, 4, dtype=np.int16)
    # per-channel distance from each cell interval to each colour component
    d = np.maximum(0, np.maximum(lo[:, None] - colors.T[:, None, :], colors.T[:, None, :] - (lo[:, None] + 3)))
    dr, dg, db = d[0], d[1], d[2]  # (64, n_colors)
    m = np.maximum(np.maximum(dr[:, None, None, :], dg[None, :, None, :]), db[None, None, :, :])
    return (m <= limit).any(axis=-1)


def unsafe_mask(pixels: np.ndarray, palette: Palette, margin: float = 8.0) -> np.ndarray:
    q = pixels >> 2
    return _unsafe_lut(palette, margin)[q[..., 0], q[..., 1], q[..., 2]]


def sanitize(img: np.ndarray, palette: Palette, margin: float = 8.0) -> np.ndarray:
    """Move scene pixels out of every target-colour detection ball.

    Offending pixels are pulled halfway toward neutral gray until clear; gray
    itself is outside every ball, so the loop terminates.
    """
    out = img.copy()
    flat = out.reshape(-1, 3)
    bad = np.flatnonzero(unsafe_mask(flat, palette, margin))
    for _ in range(8):
        if bad.size == 0:
            break
        px = flat[bad].astype(np.float64)
        flat[bad] = np.round(SAFE_GRAY + 0.5 * (px - SAFE_GRAY)).astype(np.uint8)
        bad = bad[unsafe_mask(flat[bad], palette, margin)]
    flat[bad] = SAFE_GRAY
    return out


def is_safe_color(rgb, palette: Palette, margin: float = 8.0) -> bool:
    return not bool(unsafe_mask(np.asarray(rgb, dtype=np.uint8), palette, margin))


# --- scene description ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class Box:
    name: str
    center: np.ndarray
    size: np.ndarray  # full extents x, y, z
    yaw: float
    color: tuple

    def bound(self):
        return np.asarray(self.center, float), 0.5 * float(np.linalg.norm(self.size))


@dataclass(frozen=True, eq=False)
class Cylinder:
    """Vertical cylinder; ``center`` is the geometric centre."""

    name: str
    center: np.ndarray
    radius: float
    height: float
    color: tuple

    def bound(self):
        return np.asarray(self.center, float), math.hypot(self.radius, 0.5 * self.height)


@dataclass(frozen=True, eq=False)
class Ball:
    name: str
    center: np.ndarray
    radius: float
    color: tuple

    def bound(self):
        return np.asarray(self.center, float), self.radius


@dataclass(frozen=True, eq=False)
class Capsule:
    p0: np.ndarray
    p1: np.ndarray
    radius: float
    color: tuple
    name: str = "link"

    def bound(self):
        a, b = np.asarray(self.p0, float), np.asarray(self.p1, float)
        return 0.5 * (a + b), 0.5 * float(np.linalg.norm(b - a)) + self.radius


@dataclass(frozen=True, eq=False)
class SphereTarget:
    joint_id: str
    center: np.ndarray
    radius: float
    rotation_axis: np.ndarray
    spin_angle: float
    stripes_enabled: bool = True
    gripper_state: str | None = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        ax = np.asarray(self.rotation_axis, dtype=float)
        object.__setattr__(self, "rotation_axis", ax / np.linalg.norm(ax))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "spin_angle", float(geo.wrap_angle(self.spin_angle)))

    @property
    def stripe_normal(self) -> np.ndarray:
        return geo.spin_direction(self.rotation_axis, self.spin_angle)

    def color_class(self, palette: Palette) -> str:
        return palette.class_for(self.joint_id, self.gripper_state)


@dataclass(frozen=True)
class Light:
    gain: float = 1.0
    tint: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True, eq=False)
class SceneStyle:
    """Appearance that persists over an episode; the target of perturbations."""

    table_texture: str = "solid"  # solid | checker | stripes | noise
    table_colors: tuple = ((150, 120, 90), (120, 95, 70))
    table_seed: int = 0
    backdrop: str = "gradient"  # gradient | solid | stripes | noise
    backdrop_colors: tuple = ((70, 80, 95), (165, 170, 180))
    backdrop_seed: int = 0
    light: Light = Light()
    object_colors: dict = field(default_factory=dict)
    distractors: tuple = ()
    camera_offsets: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Scene:
    objects: Sequence = ()
    capsules: Sequence = ()
    spheres: Sequence[SphereTarget] = ()
    style: SceneStyle = SceneStyle()
    table_bounds: tuple = (0.1, 1.0, -0.55, 0.55)  # x0, x1, y0, y1
    table_height: float = 0.0


@dataclass(frozen=True, eq=False)
class ViewImage:
    view_name: str
    pixels: np.ndarray  # (256, 256, 3) uint8
    mask: np.ndarray | None = None  # sphere coverage

    def __post_init__(self):
        if self.pixels.shape != (VIEW_SIZE, VIEW_SIZE, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(f"view {self.view_name}: expected 256x256x3 uint8 pixels")
        if self.view_name not in VIEW_ORDER:
            raise ValueError(f"unknown view name {self.view_name!r}")


@dataclass(frozen=True, eq=False)
class TiledImage:
    pixels: np.ndarray  # (512, 512, 3) uint8
    quadrant_order: tuple = VIEW_ORDER

    def __post_init__(self):
        if self.pixels.shape != (TILE_SIZE, TILE_SIZE, 3) or self.pixels.dtype != np.uint8:
            raise ValueError("tiled image must be 512x512x3 uint8")


@dataclass(frozen=True, eq=False)
class ViewLayers:
    scene: np.ndarray  # uint8 scene colours
    spheres: np.ndarray  # uint8 sphere colours (zero where uncovered)
    mask: np.ndarray  # bool sphere coverage
    sphere_index: np.ndarray  # int, -1 where uncovered

    def composite(self) -> np.ndarray:
        out = self.scene.copy()
        out[self.mask] = self.spheres[self.mask]
        return out


# --- procedural textures -------------------------------------------------


def value_noise(rng: np.random.Generator, shape: tuple, cells: int) -> np.ndarray:
    """Bilinearly upsampled uniform noise in [0, 1], shape (h, w)."""
    h, w = shape
    grid = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h, endpoint=False)
    xs = np.linspace(0, cells, w, endpoint=False)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy


def _noise_at(seed: int, u: np.ndarray, v: np.ndarray, cells: int = 8) -> np.ndarray:
    """Value noise sampled at continuous coordinates in [0, 1]^2."""
    rng = np.random.default_rng(seed)
    grid = rng.random((cells + 1, cells + 1))
    x = np.clip(u, 0, 1 - 1e-9) * cells
    y = np.clip(v, 0, 1 - 1e-9) * cells
    x0, y0 = x.astype(int), y.astype(int)
    fx, fy = x - x0, y - y0
    return (
        (grid[y0, x0] * (1 - fx) + grid[y0, x0 + 1] * fx) * (1 - fy)
        + (grid[y0 + 1, x0] * (1 - fx) + grid[y0 + 1, x0 + 1] * fx) * fy
    )


def _mix(c0, c1, w: np.ndarray) -> np.ndarray:
    c0 = np.asarray(c0, float)
    c1 = np.asarray(c1, float)
    return c0 + (c1 - c0) * w[..., None]


def table_colors(style: SceneStyle, xy: np.ndarray, bounds) -> np.ndarray:
    c0, c1 = style.table_colors
    x, y = xy[:, 0], xy[:, 1]
    kind = style.table_texture
    if kind == "solid":
        return np.broadcast_to(np.asarray(c0, float), (len(xy), 3)).copy()
    if kind == "checker":
        w = ((np.floor(x / 0.08) + np.floor(y / 0.08)) % 2).astype(float)
        return _mix(c0, c1, w)
    if kind == "stripes":
        w = (np.floor((x + y) / 0.05) % 2).astype(float)
        return _mix(c0, c1, w)
    if kind == "noise":
        x0, x1, y0, y1 = bounds
        w = _noise_at(style.table_seed, (x - x0) / (x1 - x0), (y - y0) / (y1 - y0))
        return _mix(c0, c1, w)
    raise ValueError(f"unknown table texture {kind!r}")


def backdrop_colors(style: SceneStyle, dirs: np.ndarray) -> np.ndarray:
    c0, c1 = style.backdrop_colors
    elev = np.clip(dirs[..., 2], -1, 1)
    kind = style.backdrop
    if kind == "solid":
        return np.broadcast_to(np.asarray(c0, float), dirs.shape).copy()
    if kind == "gradient":
        return _mix(c0, c1, 0.5 * (elev + 1))
    az = np.arctan2(dirs[..., 1], dirs[..., 0])
    if kind == "stripes":
        return _mix(c0, c1, (np.floor(az / 0.12) % 2).astype(float))
    if kind == "noise":
        w = _noise_at(style.backdrop_seed, (az + math.pi) / (2 * math.pi), 0.5 * (elev + 1), cells=12)
        return _mix(c0, c1, w)
    raise ValueError(f"unknown backdrop {kind!r}")


# --- ray/primitive intersection -----------------------------------------


def _ray_sphere(o, d, c, r):
    oc = o - c
    b = d @ oc
    cc = oc @ oc - r * r
    h = b * b - cc
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(h)
    return np.where((h >= 0) & (t > 0), t, np.inf)


def _ray_box(o, d, box: Box):
    R = geo.rot_z(box.yaw)
    ol = R.T @ (o - box.center)
    dl = d @ R
    h = 0.5 * np.asarray(box.size, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - ol) / dl
        t2 = (h - ol) / dl
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)


def _box_normals(p, box: Box):
    R = geo.rot_z(box.yaw)
    pl = (p - box.center) @ R
    h = 0.5 * np.asarray(box.size, float)
    k = np.argmax(np.abs(pl) / h, axis=-1)
    nl = np.zeros_like(pl)
    nl[np.arange(len(pl)), k] = np.sign(pl[np.arange(len(pl)), k])
    return nl @ R.T


def _ray_cylinder(o, d, cyl: Cylinder):
    c = np.asarray(cyl.center, float)
    hh = 0.5 * cyl.height
    oc = o - c
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = d[:, 0] * oc[0] + d[:, 1] * oc[1]
    cc = oc[0] ** 2 + oc[1] ** 2 - cyl.radius**2
    h = b * b - a * cc
    with np.errstate(invalid="ignore", divide="ignore"):
        ts = (-b - np.sqrt(h)) / a
    zs = oc[2] + ts * d[:, 2]
    t_side = np.where((h >= 0) & (a > 1e-12) & (ts > 0) & (np.abs(zs) <= hh), ts, np.inf)
    best = t_side
    for zc in (hh, -hh):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - oc[2]) / d[:, 2]
        px = oc[0] + tc * d[:, 0]
        py = oc[1] + tc * d[:, 1]
        ok = (tc > 0) & (px * px + py * py <= cyl.radius**2)
        best = np.minimum(best, np.where(ok, tc, np.inf))
    return best


def _cylinder_normals(p, cyl: Cylinder):
    c = np.asarray(cyl.center, float)
    rel = p - c
    hh = 0.5 * cyl.height
    n = np.zeros_like(rel)
    radial = np.hypot(rel[:, 0], rel[:, 1])
    on_cap = np.abs(np.abs(rel[:, 2]) - hh) < 1e-6 * max(1.0, hh) + 1e-7
    on_cap |= radial < cyl.radius * (1 - 1e-6)
    n[on_cap, 2] = np.sign(rel[on_cap, 2])
    side = ~on_cap
    n[side, 0] = rel[side, 0] / radial[side]
    n[side, 1] = rel[side, 1] / radial[side]
    return n


def _ray_capsule(o, d, cap: Capsule):
    a = np.asarray(cap.p0, float)
    b = np.asarray(cap.p1, float)
    r = cap.radius
    ba = b - a
    oa = o - a
    baba = ba @ ba
    bard = d @ ba
    baoa = ba @ oa
    rdoa = d @ oa
    oaoa = oa @ oa
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r * r * baba
    h = qb * qb - qa * qc
    with np.errstate(invalid="ignore", divide="ignore"):
        t_body = (-qb - np.sqrt(h)) / qa
    y = baoa + t_body * bard
    body_ok = (h >= 0) & (qa > 1e-12) & (y > 0) & (y < baba) & (t_body > 0)
    t = np.where(body_ok, t_body, np.inf)
    t = np.minimum(t, _ray_sphere(o, d, a, r))
    t = np.minimum(t, _ray_sphere(o, d, b, r))
    return t


def _capsule_normals(p, cap: Capsule):
    a = np.asarray(cap.p0, float)
    ba = np.asarray(cap.p1, float) - a
    s = np.clip(((p - a) @ ba) / (ba @ ba), 0, 1)
    n = p - (a + s[:, None] * ba)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _intersect(prim, o, d):
    if isinstance(prim, Capsule):
        return _ray_capsule(o, d, prim)
    if isinstance(prim, Box):
        return _ray_box(o, d, prim)
    if isinstance(prim, Cylinder):
        return _ray_cylinder(o, d, prim)
    return _ray_sphere(o, d, np.asarray(prim.center, float), prim.radius)


def _normals(prim, p):
    if isinstance(prim, Capsule):
        return _capsule_normals(p, prim)
    if isinstance(prim, Box):
        return _box_normals(p, prim)
    if isinstance(prim, Cylinder):
        return _cylinder_normals(p, prim)
    n = p - np.asarray(prim.center, float)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def screen_bbox(cam_pose, intr: Intrinsics, center, radius) -> tuple[int, int, int, int] | None:
    """Conservative pixel bbox (u0, u1, v0, v1), exclusive ends; None if off-screen."""
    c = to_camera(cam_pose, center)
    if c[2] + radius <= 1e-3:
        return None
    if c[2] - radius <= 1e-3:
        return 0, intr.width, 0, intr.height
    corners = c + radius * np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    u = intr.cx + intr.fx * corners[:, 0] / corners[:, 2]
    v = intr.cy + intr.fy * corners[:, 1] / corners[:, 2]
    u0 = max(0, int(math.floor(u.min())) - 1)
    u1 = min(intr.width, int(math.ceil(u.max())) + 2)
    v0 = max(0, int(math.floor(v.min())) - 1)
    v1 = min(intr.height, int(math.ceil(v.max())) + 2)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


# --- sphere appearance ---------------------------------------------------


def stripe_roles(s: np.ndarray, stripes: bool) -> np.ndarray:
    """Per-point role from the stripe coordinate s in [-1, 1]: 0 base, 1 stripe, 2 pole."""
    if not stripes:
        return np.zeros(s.shape, dtype=np.int8)
    band = np.clip(np.floor((s + 1.0) * 0.5 * N_STRIPES), 0, N_STRIPES - 1).astype(np.int8)
    roles = (band % 2).astype(np.int8)
    roles[s > POLE_CAP] = 2
    return roles


def sphere_shading(unit_normals: np.ndarray) -> np.ndarray:
    return SPHERE_AMBIENT + (1.0 - SPHERE_AMBIENT) * np.clip(unit_normals @ LIGHT_DIR, 0.0, None)


def role_colors(palette: Palette, cls: str) -> np.ndarray:
    return np.array(
        [palette.base_color(cls), palette.stripe_color(cls), np.array(palette.pole, np.uint8)], dtype=float
    )


def sphere_colors(target: SphereTarget, hit_points: np.ndarray, palette: Palette) -> np.ndarray:
    ns = (hit_points - target.center) / target.radius
    ns /= np.linalg.norm(ns, axis=1, keepdims=True)
    roles = stripe_roles(ns @ target.stripe_normal, target.stripes_enabled)
    cols = role_colors(palette, target.color_class(palette))[roles]
    return cols * sphere_shading(ns)[:, None]


# --- rendering -----------------------------------------------------------


def _table_depth(scene: Scene, o, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (scene.table_height - o[2]) / dirs[..., 2]
    p = o + t[..., None] * dirs
    x0, x1, y0, y1 = scene.table_bounds
    ok = (t > 0) & (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)
    return np.where(ok, t, np.inf)


def _object_color(style: SceneStyle, prim) -> tuple:
    return style.object_colors.get(getattr(prim, "name", ""), prim.color)


def render_layers(
    scene: Scene,
    cam_pose: np.ndarray,
    intr: Intrinsics,
    palette: Palette = DEFAULT_PALETTE,
    draw_scene: bool = True,
    dirs: np.ndarray | None = None,
) -> ViewLayers:
    o = cam_pose[:3, 3]
    if dirs is None:
        dirs = pixel_directions(cam_pose, intr)
    H, W = intr.height, intr.width
    t_table = _table_depth(scene, o, dirs)
    style = scene.style

    if draw_scene:
        depth = t_table.copy()
        pid = np.where(np.isfinite(t_table), 0, -1).astype(np.int32)
        prims = list(scene.objects) + list(style.distractors) + list(scene.capsules)
        boxes = []
        for k, prim in enumerate(prims, start=1):
            bb = screen_bbox(cam_pose, intr, *prim.bound())
            boxes.append(bb)
            if bb is None:
                continue
            u0, u1, v0, v1 = bb
            sub = dirs[v0:v1, u0:u1].reshape(-1, 3)
            t = _intersect(prim, o, sub).reshape(v1 - v0, u1 - u0)
            dsub = depth[v0:v1, u0:u1]
            closer = t < dsub
            dsub[closer] = t[closer]
            pid[v0:v1, u0:u1][closer] = k
        rgb = backdrop_colors(style, dirs)
        tm = pid == 0
        if tm.any():
            pts = o + depth[tm][:, None] * dirs[tm]
            shade = SCENE_AMBIENT + (1 - SCENE_AMBIENT) * max(LIGHT_DIR[2], 0.0)
            rgb[tm] = table_colors(style, pts[:, :2], scene.table_bounds) * shade
        for k, (prim, bb) in enumerate(zip(prims, boxes), start=1):
            if bb is None:
                continue
            u0, u1, v0, v1 = bb
            m = pid[v0:v1, u0:u1] == k
            if not m.any():
                continue
            dsub = dirs[v0:v1, u0:u1][m]
            pts = o + depth[v0:v1, u0:u1][m][:, None] * dsub
            n = _normals(prim, pts)
            n = np.where((n * dsub).sum(1, keepdims=True) > 0, -n, n)
            shade = SCENE_AMBIENT + (1 - SCENE_AMBIENT) * np.clip(n @ LIGHT_DIR, 0, None)
            block = rgb[v0:v1, u0:u1]
            block[m] = np.asarray(_object_color(style, prim), float) * shade[:, None]
        gain = style.light.gain * np.asarray(style.light.tint, float)
        scene_rgb = sanitize(np.clip(np.round(rgb * gain), 0, 255).astype(np.uint8), palette)
    else:
        scene_rgb = np.zeros((H, W, 3), dtype=np.uint8)

    sph_rgb = np.zeros((H, W, 3), dtype=np.uint8)
    sph_depth = t_table.copy()
    sph_idx = np.full((H, W), -1, dtype=np.int32)
    boxes = []
    for k, sp in enumerate(scene.spheres):
        bb = screen_bbox(cam_pose, intr, sp.center, sp.radius)
        boxes.append(bb)
        if bb is None:
            continue
        u0, u1, v0, v1 = bb
        t = _ray_sphere(o, dirs[v0:v1, u0:u1].reshape(-1, 3), sp.center, sp.radius).reshape(v1 - v0, u1 - u0)
        dsub = sph_depth[v0:v1, u0:u1]
        closer = t < dsub
        dsub[closer] = t[closer]
        sph_idx[v0:v1, u0:u1][closer] = k
    for k, (sp, bb) in enumerate(zip(scene.spheres, boxes)):
        if bb is None:
            continue
        u0, u1, v0, v1 = bb
        m = sph_idx[v0:v1, u0:u1] == k
        if not m.any():
            continue
        pts = o + sph_depth[v0:v1, u0:u1][m][:, None] * dirs[v0:v1, u0:u1][m]
        block = sph_rgb[v0:v1, u0:u1]
        block[m] = np.clip(np.round(sphere_colors(sp, pts, palette)), 0, 255).astype(np.uint8)
    return ViewLayers(scene_rgb, sph_rgb, sph_idx >= 0, sph_idx)


def render_view(
    scene: Scene,
    view_name: str,
    cam_pose: np.ndarray,
    intr: Intrinsics,
    palette: Palette = DEFAULT_PALETTE,
    draw_scene: bool = True,
) -> ViewImage:
    layers = render_layers(scene, cam_pose, intr, palette, draw_scene)
    return ViewImage(view_name, layers.composite(), layers.mask)


# --- tiling --------------------------------------------------------------


def tile(views) -> TiledImage:
    if isinstance(views, dict):
        views = [views[n] for n in VIEW_ORDER] if set(views) == set(VIEW_ORDER) else list(views.values())
    views = list(views)
    if len(views) != 4 or tuple(v.view_name for v in views) != VIEW_ORDER:
        raise WrongViewSet(f"expected views {VIEW_ORDER}, got {tuple(v.view_name for v in views)}")
    out = np.empty((TILE_SIZE, TILE_SIZE, 3), dtype=np.uint8)
    for k, v in enumerate(views):
        r, c = divmod(k, 2)
        out[r * VIEW_SIZE : (r + 1) * VIEW_SIZE, c * VIEW_SIZE : (c + 1) * VIEW_SIZE] = v.pixels
    return TiledImage(out)


def untile(tiled: TiledImage) -> list[ViewImage]:
    out = []
    for k, name in enumerate(tiled.quadrant_order):
        r, c = divmod(k, 2)
        px = tiled.pixels[r * VIEW_SIZE : (r + 1) * VIEW_SIZE, c * VIEW_SIZE : (c + 1) * VIEW_SIZE].copy()
        out.append(ViewImage(name, px))
    return out


def tile_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    out = np.zeros((TILE_SIZE, TILE_SIZE), dtype=bool)
    for k, m in enumerate(masks):
        r, c = divmod(k, 2)
        out[r * VIEW_SIZE : (r + 1) * VIEW_SIZE, c * VIEW_SIZE : (c + 1) * VIEW_SIZE] = m
    return out


# --- random backgrounds --------------------------------------------------


def random_background(seed: int, size: int = VIEW_SIZE, palette: Palette = DEFAULT_PALETTE) -> np.ndarray:
    """Seeded mixture of a solid or gradient fill with value-noise patches."""
    rng = np.random.default_rng([seed, 0x6B67])
    c0, c1 = rng.integers(0, 256, 3), rng.integers(0, 256, 3)
    if rng.random() < 0.5:
        img = np.broadcast_to(c0.astype(float), (size, size, 3)).copy()
    else:
        ang = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:size, 0:size] / size
        w = np.clip(0.5 + (xx - 0.5) * math.cos(ang) + (yy - 0.5) * math.sin(ang), 0, 1)
        img = _mix(c0, c1, w)
    for _ in range(int(rng.integers(2, 7))):
        h, w = (int(x) for x in rng.integers(size // 8, size // 2, 2))
        y, x = int(rng.integers(0, size - h)), int(rng.integers(0, size - w))
        a, b = rng.integers(0, 256, 3), rng.integers(0, 256, 3)
        noise = value_noise(rng, (h, w), int(rng.integers(2, 9)))
        img[y : y + h, x : x + w] = _mix(a, b, noise)
    return sanitize(np.round(img).astype(np.uint8), palette)


def composite_random_background(layer: ViewImage, seed: int, palette: Palette = DEFAULT_PALETTE) -> ViewImage:
    if layer.mask is None:
        raise ValueError("sphere layer carries no coverage mask")
    out = random_background(seed, layer.pixels.shape[0], palette)
    out[layer.mask] = layer.pixels[layer.mask]
    return ViewImage(layer.view_name, out, layer.mask.copy())


# --- perturbations -------------------------------------------------------


def random_safe_color(rng: np.random.Generator, palette: Palette) -> tuple:
    while True:
        c = tuple(int(x) for x in rng.integers(0, 256, 3))
        if is_safe_color(c, palette, margin=16.0):
            return c


def apply_perturbation(
    style: SceneStyle,
    category: str,
    seed: int,
    *,
    magnitude: float = 1.0,
    object_names: Sequence[str] = (),
    avoid_xy: Sequence = (),
    table_bounds: tuple = (0.25, 0.85, -0.4, 0.4),
    gain: float | None = None,
    tint: Sequence[float] | None = None,
    palette: Palette = DEFAULT_PALETTE,
) -> SceneStyle:
    """Return a copy of ``style`` with one seeded perturbation applied.

    ``magnitude`` in [0, 1] scales the camera_pose shift; 1 (the maximum)
    turns each fixed camera by 5 degrees and moves it by 5 cm.
    """
    if not 0.0 <= magnitude <= 1.0:
        raise ValueError("magnitude must lie in [0, 1]")
    if category not in PERTURBATIONS:
        raise UnknownCategory(f"unknown perturbation category {category!r}")
    rng = np.random.default_rng([seed, PERTURBATIONS.index(category)])
    if category == "object_color":
        colors = dict(style.object_colors)
        for name in object_names:
            colors[name] = random_safe_color(rng, palette)
        return replace(style, object_colors=colors)
    if category == "lighting":
        g = float(rng.uniform(0.6, 1.4)) if gain is None else float(gain)
        t = tuple(float(x) for x in rng.uniform(0.8, 1.2, 3)) if tint is None else tuple(float(x) for x in tint)
        return replace(style, light=Light(g, t))
    if category == "table_texture":
        kind = ("checker", "stripes", "noise")[int(rng.integers(0, 3))]
        cols = (random_safe_color(rng, palette), random_safe_color(rng, palette))
        return replace(style, table_texture=kind, table_colors=cols, table_seed=int(rng.integers(1 << 30)))
    if category == "background":
        kind = ("solid", "gradient", "stripes", "noise")[int(rng.integers(0, 4))]
        cols = (random_safe_color(rng, palette), random_safe_color(rng, palette))
        return replace(style, backdrop=kind, backdrop_colors=cols, backdrop_seed=int(rng.integers(1 << 30)))
    if category == "distractors":
        x0, x1, y0, y1 = table_bounds
        avoid = [np.asarray(p, float)[:2] for p in avoid_xy]
        found = []
        for k in range(int(rng.integers(1, 4))):
            for _ in range(200):
                xy = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
                if all(np.linalg.norm(xy - a) > 0.15 for a in avoid + [f.center[:2] for f in found]):
                    break
            else:
                continue
            size = rng.uniform(0.03, 0.07)
            color = random_safe_color(rng, palette)
            kind = int(rng.integers(0, 3))
            name = f"distractor{k}"
            if kind == 0:
                prim = Box(name, np.array([xy[0], xy[1], size / 2]), np.full(3, size), float(rng.uniform(0, math.pi)), color)
            elif kind == 1:
                prim = Cylinder(name, np.array([xy[0], xy[1], size]), size / 2, 2 * size, color)
            else:
                prim = Ball(name, np.array([xy[0], xy[1], size / 2]), size / 2, color)
            found.append(prim)
        return replace(style, distractors=tuple(style.distractors) + tuple(found))
    # camera_pose
    offsets = dict(style.camera_offsets)
    for name in ("front", "left_shoulder", "right_shoulder"):
        axis = rng.normal(size=3)
        direction = rng.normal(size=3)
        R = geo.rotation(axis, math.radians(5.0) * magnitude)
        t = 0.05 * magnitude * direction / np.linalg.norm(direction)
        off = geo.transform(R, t)
        offsets[name] = off @ offsets[name] if name in offsets else off
    return replace(style, camera_offsets=offsets)


# --- PNG IO --------------------------------------------------------------


def write_png(path: str | Path, pixels: np.ndarray) -> None:
    try:
        Image.fromarray(np.ascontiguousarray(pixels), mode="RGB").save(path, format="PNG", compress_level=6)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def read_png(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise IoFailure(f"{path}: expected RGB image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
