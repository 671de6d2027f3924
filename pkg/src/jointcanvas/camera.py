"""Pinhole cameras, the four-camera rig, and multi-view triangulation.

Camera frames follow the usual vision convention: +z is the optical axis,
+x points right in the image and +y points down. Pixel centres sit at
integer coordinates, so ``(cx, cy) = (127.5, 127.5)`` is the centre of a
256x256 image.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BehindCamera, DegenerateGeometry, OutOfBounds

# Shared with the tiler: top-left, top-right, bottom-left, bottom-right.
VIEW_ORDER = ("front", "wrist", "left_shoulder", "right_shoulder")
NEAR = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 221.0
    fy: float = 221.0
    cx: float = 127.5
    cy: float = 127.5
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Camera:
    name: str
    intrinsics: Intrinsics
    mount: np.ndarray  # camera-to-world, or camera-to-end-effector when on_ee
    on_ee: bool = False
    sphere_radius: float = 0.05  # world radius used when drawing targets in this view

    def __post_init__(self):
        R = np.asarray(self.mount, dtype=float)[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError(f"camera {self.name}: mount rotation is not orthonormal")
        object.__setattr__(self, "mount", np.asarray(self.mount, dtype=float))


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: dict = field(default_factory=dict)  # name -> Camera, in VIEW_ORDER

    def __post_init__(self):
        if tuple(self.cameras) != VIEW_ORDER:
            raise ValueError(f"rig must define cameras {VIEW_ORDER} in that order")
        if sum(c.on_ee for c in self.cameras.values()) != 1 or not self.cameras["wrist"].on_ee:
            raise ValueError("exactly one end-effector camera (wrist) is required")

    def __getitem__(self, name: str) -> Camera:
        return self.cameras[name]

    def with_offsets(self, offsets: dict) -> "CameraRig":
        """Perturb world-fixed mounts.

        Each offset is a 4x4 whose rotation is applied about the camera centre
        and whose translation is added to it. End-effector cameras are left alone.
        """
        cams = {}
        for name, cam in self.cameras.items():
            if name in offsets and not cam.on_ee:
                off = np.asarray(offsets[name], dtype=float)
                mount = cam.mount.copy()
                mount[:3, :3] = off[:3, :3] @ cam.mount[:3, :3]
                mount[:3, 3] = cam.mount[:3, 3] + off[:3, 3]
                cam = replace(cam, mount=mount)
            cams[name] = cam
        return CameraRig(cams)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def rig_world_poses(rig: CameraRig, ee_pose: np.ndarray) -> dict[str, np.ndarray]:
    return {n: (ee_pose @ c.mount if c.on_ee else c.mount.copy()) for n, c in rig.cameras.items()}


def to_camera(camera_pose: np.ndarray, points) -> np.ndarray:
    R, t = camera_pose[:3, :3], camera_pose[:3, 3]
    return (np.asarray(points, dtype=float) - t) @ R


def project(camera_pose: np.ndarray, intr: Intrinsics, point) -> tuple[float, float]:
    x, y, z = to_camera(camera_pose, point)
    if not np.isfinite(z):
        raise ValueError("point must be finite")
    if z <= NEAR:
        raise BehindCamera(f"point at camera depth {z:.3g} m")
    return intr.cx + intr.fx * x / z, intr.cy + intr.fy * y / z


def project_many(camera_pose: np.ndarray, intr: Intrinsics, points) -> np.ndarray:
    """Vectorised projection; rows behind the camera come back as NaN."""
    pc = to_camera(camera_pose, np.atleast_2d(points))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([intr.cx + intr.fx * pc[:, 0] / z, intr.cy + intr.fy * pc[:, 1] / z])
    uv[z <= NEAR] = np.nan
    return uv


def pixel_ray(camera_pose: np.ndarray, intr: Intrinsics, pixel) -> Ray:
    u, v = pixel
    if not (-0.5 <= u < intr.width - 0.5 and -0.5 <= v < intr.height - 0.5):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {intr.width}x{intr.height}")
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return Ray(camera_pose[:3, 3].copy(), camera_pose[:3, :3] @ d_cam)


def pixel_directions(camera_pose: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Unit world-frame ray directions for every pixel, shape (H, W, 3)."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(float)
    d = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ camera_pose[:3, :3].T


def triangulate(rays, max_condition: float = 1e8) -> tuple[np.ndarray, float]:
    """Point minimising the summed squared distance to all rays.

    Returns the point and the RMS point-to-ray distance.
    """
    rays = list(rays)
    if len(rays) < 2:
        raise DegenerateGeometry("triangulation needs at least two rays")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    projs = []
    for r in rays:
        P = np.eye(3) - np.outer(r.direction, r.direction)
        A += P
        b += P @ r.origin
        projs.append(P)
    if np.linalg.cond(A) > max_condition:
        raise DegenerateGeometry("rays are (nearly) parallel")
    X = np.linalg.solve(A, b)
    d2 = [float(np.sum((P @ (X - r.origin)) ** 2)) for P, r in zip(projs, rays)]
    return X, float(np.sqrt(np.mean(d2)))


def point_ray_distance(ray: Ray, point) -> float:
    w = np.asarray(point, dtype=float) - ray.origin
    return float(np.linalg.norm(w - (w @ ray.direction) * ray.direction))


def sphere_ellipse_center(camera_pose: np.ndarray, intr: Intrinsics, center, radius: float):
    """Image centre of a sphere's silhouette (an ellipse under perspective).

    The silhouette cone satisfies ``(x.d)^2 = |x|^2 cos^2(rho)``; intersecting
    it with the image plane gives a conic whose centre is solved directly.
    Returns None when the camera is inside the sphere or the conic is not an
    ellipse (sphere straddles the image plane at infinity).
    """
    c = to_camera(camera_pose, center)
    D = float(np.linalg.norm(c))
    if D <= radius * (1 + 1e-9):
        return None
    d = c / D
    cos2 = 1.0 - (radius / D) ** 2
    M = np.outer(d, d) - cos2 * np.eye(3)
    # Substitute normalised coords x = (u - cx)/fx, y = (v - cy)/fy.
    A2 = M[:2, :2]
    if np.linalg.det(A2) <= 0 or np.trace(A2) >= 0:
        return None
    xy = np.linalg.solve(A2, -M[:2, 2])
    return intr.cx + intr.fx * xy[0], intr.cy + intr.fy * xy[1]
