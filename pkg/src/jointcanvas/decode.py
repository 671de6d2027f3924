"""Inverse rendering of drawn targets back into a joint configuration.

Pipeline: colour-label each view, find sphere blobs, pick a multi-view
consistent candidate per joint, triangulate, fit joint positions by IK,
read stripe phases by template matching, and refit with the spin terms.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, optimize

from . import geometry as geo
from . import kinematics as kin
from . import render
from .camera import VIEW_ORDER, CameraRig, Intrinsics, Ray, project, rig_world_poses, sphere_ellipse_center, to_camera, triangulate
from .errors import AngleAmbiguous, DegenerateGeometry, InsufficientConstraints, NoConsistentSet, NonConvergent
from .kinematics import SPHERE_JOINT_NAMES, ArmModel, JointConfig

MAX_COLOR_DISTANCE = 48
MIN_RADIUS = 6.0
ANGLE_MIN_RADIUS = 8.0
MAX_RESIDUAL = 0.03
AMBIGUITY_MARGIN = 0.02
N_HYPOTHESES = 360
FIT_TOLERANCE = 0.05
MAX_TEMPLATE_PIXELS = 1500
MIN_STRIPE_FRACTION = 0.02
DECODED_SPIN_JOINTS = ("elbow", "wrist", "gripper")  # base spin is left to the fit
CLASS_JOINT = {"base": "base", "elbow": "elbow", "wrist": "wrist", "gripper_open": "gripper", "gripper_closed": "gripper"}
POLE = len(render.Palette.CLASSES)
UNKNOWN = "unknown"


@dataclass(frozen=True, eq=False)
class Labels:
    """Per-pixel colour classification of one view."""

    cls: np.ndarray  # int8: class index, POLE, or -1
    role: np.ndarray  # int8: 0 base, 1 stripe, 2 pole, -1 none


@dataclass(frozen=True, eq=False)
class Detection:
    view_name: str
    joint_id: str
    color_class: str
    centroid: tuple
    radius: float
    mean_color: tuple
    confidence: float
    occluded: bool = False
    area: int = 0
    edge: np.ndarray | None = None  # (N, 2) u, v of silhouette pixels that border the background

    def __post_init__(self):
        if not self.radius > 1.0:
            raise ValueError("detection radius must exceed 1 px")


@dataclass(frozen=True, eq=False)
class JointEstimate:
    joint_id: str
    center: np.ndarray
    residual: float
    detections: tuple  # Detection per used view
    low_confidence: bool = False
    alternatives: tuple = ()  # further consistent (center, residual, detections)


@dataclass(frozen=True, eq=False)
class FilterResult:
    joints: dict  # joint_id -> JointEstimate
    dropped: int
    missing: tuple


@dataclass(frozen=True, eq=False)
class DecodedTargets:
    centers: dict  # joint_id -> 3D centre
    center_residuals: dict
    spin_angles: dict  # joint_id -> rad, only where decoded
    gripper_state: str
    q_target: JointConfig
    fit_residual: float
    angle_scores: dict = field(default_factory=dict)
    detections: dict = field(default_factory=dict)
    dropped: int = 0
    missing: tuple = ()

    def to_json(self) -> dict:
        return {
            "centers": {k: [float(x) for x in v] for k, v in self.centers.items()},
            "center_residuals": {k: float(v) for k, v in self.center_residuals.items()},
            "spin_angles": {k: float(v) for k, v in self.spin_angles.items()},
            "gripper_state": self.gripper_state,
            "q_target": self.q_target.to_json(),
            "fit_residual": float(self.fit_residual),
            "dropped": self.dropped,
            "missing": list(self.missing),
            "detections": {
                v: [
                    {
                        "joint_id": d.joint_id,
                        "class": d.color_class,
                        "centroid": [float(d.centroid[0]), float(d.centroid[1])],
                        "radius": float(d.radius),
                        "confidence": float(d.confidence),
                        "occluded": d.occluded,
                    }
                    for d in dets
                ]
                for v, dets in self.detections.items()
            },
        }


# --- colour labelling ----------------------------------------------------


def label_pixels(pixels: np.ndarray, palette: render.Palette = render.DEFAULT_PALETTE, max_distance: float = MAX_COLOR_DISTANCE) -> Labels:
    h, w, _ = pixels.shape
    cls = np.full(h * w, -1, dtype=np.int8)
    role = np.full(h * w, -1, dtype=np.int8)
    flat = pixels.reshape(-1, 3)
    # the LUT is conservative, so only candidates need the exact metric
    cand = np.flatnonzero(render.unsafe_mask(flat, palette, margin=max_distance - palette.detect_radius))
    if cand.size:
        colors, labels = palette.marker_colors()
        d = render.color_distance(flat[cand], colors)
        k = d.argmin(axis=1)
        ok = d[np.arange(len(k)), k] <= max_distance
        class_ids = np.array([POLE if c == "pole" else render.Palette.CLASSES.index(c) for c, _ in labels], dtype=np.int8)
        roles = np.array([{"base": 0, "stripe": 1, "pole": 2}[r] for _, r in labels], dtype=np.int8)
        cls[cand[ok]] = class_ids[k[ok]]
        role[cand[ok]] = roles[k[ok]]
    return Labels(cls.reshape(h, w), role.reshape(h, w))


def _fit_circle(u: np.ndarray, v: np.ndarray) -> tuple[float, float, float] | None:
    """Algebraic least-squares circle through boundary points."""
    if len(u) < 8:
        return None
    A = np.column_stack([u, v, np.ones_like(u)])
    b = -(u * u + v * v)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    cu, cv = -sol[0] / 2, -sol[1] / 2
    r2 = cu * cu + cv * cv - sol[2]
    if r2 <= 0:
        return None
    return float(cu), float(cv), float(math.sqrt(r2))


_FOUR = ndimage.generate_binary_structure(2, 1)


def detect_spheres(
    view: render.ViewImage,
    palette: render.Palette = render.DEFAULT_PALETTE,
    max_distance: float = MAX_COLOR_DISTANCE,
    min_radius: float = MIN_RADIUS,
    labels: Labels | None = None,
) -> list[Detection]:
    """Connected colour blobs per sphere class; duplicates are all returned."""
    if labels is None:
        labels = label_pixels(view.pixels, palette, max_distance)
    cls = labels.cls
    h, w = cls.shape
    any_marker = cls >= 0
    pole = cls == POLE
    out = []
    for ci, cname in enumerate(render.Palette.CLASSES):
        own = cls == ci
        if not own.any():
            continue
        comp, n = ndimage.label(own | pole, structure=_FOUR)
        slices = ndimage.find_objects(comp)
        for cid in np.unique(comp[own]):
            sl = slices[cid - 1]
            v0, v1 = max(sl[0].start - 2, 0), min(sl[0].stop + 2, h)
            u0, u1 = max(sl[1].start - 2, 0), min(sl[1].stop + 2, w)
            sub_own = own[v0:v1, u0:u1]
            sub_marker = any_marker[v0:v1, u0:u1] & ~pole[v0:v1, u0:u1]
            region = ndimage.binary_fill_holes(comp[v0:v1, u0:u1] == cid)
            own_region = region & sub_own
            if own_region.sum() < 0.25 * math.pi * min_radius**2:
                continue
            area = int(region.sum())
            vv, uu = np.nonzero(region)
            vv, uu = vv + v0, uu + u0
            edge = region & ~ndimage.binary_erosion(region, structure=_FOUR, border_value=0)
            ring = ndimage.binary_dilation(region, structure=_FOUR) & ~region
            touches_other = bool((ring & sub_marker).any())
            touches_border = bool(uu.min() == 0 or vv.min() == 0 or uu.max() == w - 1 or vv.max() == h - 1)
            occluded = touches_other or touches_border
            # silhouette edge that borders the background, not another sphere or the frame
            free = edge & ~ndimage.binary_dilation(sub_marker & ~region, structure=_FOUR)
            ev, eu = np.nonzero(free)
            ev, eu = ev + v0, eu + u0
            keep = (eu > 0) & (ev > 0) & (eu < w - 1) & (ev < h - 1)
            edge_uv = np.column_stack([eu[keep], ev[keep]]).astype(float)
            if not occluded:
                cu, cv = float(uu.mean()), float(vv.mean())
                radius = math.sqrt(area / math.pi)
                confidence = 1.0
            else:
                fit = _fit_circle(edge_uv[:, 0], edge_uv[:, 1])
                if fit is None:
                    continue
                cu, cv, radius = fit
                radius += 0.5  # edge pixel centres sit half a pixel inside
                if radius > 2.0 * math.sqrt(area / math.pi) + 4:
                    continue
                confidence = float(np.clip(area / (math.pi * radius * radius), 0.0, 1.0)) * 0.9
            if radius < min_radius:
                continue
            sub_px = view.pixels[v0:v1, u0:u1]
            base_px = sub_px[own_region & (labels.role[v0:v1, u0:u1] == 0)]
            if len(base_px) == 0:
                base_px = sub_px[own_region]
            mean = tuple(float(x) for x in base_px.reshape(-1, 3).mean(axis=0))
            out.append(
                Detection(view.view_name, CLASS_JOINT[cname], cname, (cu, cv), float(radius), mean, confidence, occluded, area, edge_uv)
            )
    return out


def classify_gripper(detection: Detection, palette: render.Palette = render.DEFAULT_PALETTE) -> str:
    """Open or closed by the nearer gripper colour; unknown if neither is within the detection ball.

    The mean colour is normalised for sphere shading (85 to 100 percent) by
    testing the unshaded colour range.
    """
    c = np.asarray(detection.mean_color, float)
    best, best_d = UNKNOWN, float("inf")
    for state in ("open", "closed"):
        ref = np.asarray(getattr(palette, f"gripper_{state}"), float)
        d = float(np.min([np.abs(c - s * ref).max() for s in np.linspace(render.SPHERE_AMBIENT, 1.0, 7)]))
        if d < best_d:
            best, best_d = state, d
    return best if best_d <= palette.detect_radius else UNKNOWN


# --- multi-view consistency ----------------------------------------------


def _ray(cam_pose: np.ndarray, intr: Intrinsics, uv) -> Ray:
    d = np.array([(uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy, 1.0])
    return Ray(cam_pose[:3, 3].copy(), cam_pose[:3, :3] @ d)


def _max_ray_distance(rays, X) -> float:
    return max(float(np.linalg.norm((X - r.origin) - ((X - r.origin) @ r.direction) * r.direction)) for r in rays)


def _triangulate_corrected(dets, cam_poses, rig: CameraRig):
    """Triangulate, then undo the perspective offset of silhouette centres and re-solve."""
    rays = [_ray(cam_poses[d.view_name], rig[d.view_name].intrinsics, d.centroid) for d in dets]
    X, _ = triangulate(rays)
    fixed = []
    for d in dets:
        pose, intr = cam_poses[d.view_name], rig[d.view_name].intrinsics
        uv = np.asarray(d.centroid, float)
        try:
            e = sphere_ellipse_center(pose, intr, X, rig[d.view_name].sphere_radius)
            p = project(pose, intr, X)
        except Exception:
            e = None
        if e is not None:
            uv = uv - (np.asarray(e) - np.asarray(p))
        fixed.append(_ray(pose, intr, uv))
    X, _ = triangulate(fixed)
    return X, _max_ray_distance(fixed, X)


def _silhouette_sin(radius_px: float, f: float, cos_theta: float) -> float:
    """sin of the silhouette cone half-angle from the area-equivalent radius.

    A sphere seen at angle theta off the optical axis projects to an ellipse
    with a * b = f^2 s^2 cos(rho) / (cos^2 theta - s^2)^1.5, s = sin(rho),
    which increases monotonically in s.
    """
    c2 = cos_theta * cos_theta

    def f_ab(sv):
        return f * f * sv * sv * math.sqrt(1 - sv * sv) / (c2 - sv * sv) ** 1.5 - radius_px * radius_px

    hi = math.sqrt(c2) * (1 - 1e-9)
    if f_ab(hi * 0.999) < 0:
        return hi * 0.999
    return float(optimize.brentq(f_ab, 1e-9, hi * 0.999))


def _single_view_center(d: Detection, cam_poses, rig: CameraRig) -> np.ndarray:
    """Depth from apparent size, with the ellipse-centre bias removed once."""
    cam = rig[d.view_name]
    intr, P = cam.intrinsics, cam_poses[d.view_name]
    uv = np.asarray(d.centroid, float)
    X = None
    for _ in range(2):
        ray = _ray(P, intr, uv)
        s = _silhouette_sin(d.radius, intr.fx, float(ray.direction @ P[:3, 2]))
        X = ray.at(cam.sphere_radius / s)
        ec = sphere_ellipse_center(P, intr, X, cam.sphere_radius)
        if ec is None:
            break
        uv = uv - (np.asarray(ec) - np.asarray(d.centroid))
    return X


MAX_EDGE_POINTS = 256


def refine_center(dets, cam_poses, rig: CameraRig, X0) -> np.ndarray | None:
    """Sphere centre whose silhouette cone best passes through the detected edge pixels.

    Each free edge pixel's ray should make the cone half-angle asin(R / D)
    with the ray to the centre, less half a pixel for pixel-centre sampling.
    Works from one view too, since the cone angle fixes the depth. Returns
    None when no detection carries enough edge pixels or the fit fails.
    """
    origins, dirs, radii, half_px = [], [], [], []
    for d in dets:
        if d.edge is None or len(d.edge) < 8:
            continue
        cam = rig[d.view_name]
        intr, P = cam.intrinsics, cam_poses[d.view_name]
        e = d.edge
        if len(e) > MAX_EDGE_POINTS:
            e = e[np.linspace(0, len(e) - 1, MAX_EDGE_POINTS).astype(int)]
        rays = np.column_stack([(e[:, 0] - intr.cx) / intr.fx, (e[:, 1] - intr.cy) / intr.fy, np.ones(len(e))]) @ P[:3, :3].T
        dirs.append(rays / np.linalg.norm(rays, axis=1, keepdims=True))
        origins.append(np.repeat(P[None, :3, 3], len(e), axis=0))
        radii.append(np.full(len(e), cam.sphere_radius))
        half_px.append(np.full(len(e), 0.5 / intr.fx))
    if not dirs:
        return None
    O, Dn, R, H = (np.concatenate(x) for x in (origins, dirs, radii, half_px))
    scale = 1.0 / H.mean() / 2.0  # residuals in roughly pixels

    def resid(X):
        w = X - O
        dist = np.linalg.norm(w, axis=1)
        ang = np.arctan2(np.linalg.norm(np.cross(Dn, w), axis=1), np.einsum("ij,ij->i", Dn, w))
        cone = np.arcsin(np.clip(R / np.maximum(dist, 1e-9), 0.0, 1.0))
        return (ang - (cone - H)) * scale

    try:
        sol = optimize.least_squares(resid, np.asarray(X0, float), loss="soft_l1", f_scale=1.0, max_nfev=60)
    except (ValueError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(sol.x)) or np.any(np.linalg.norm(sol.x - O, axis=1) <= R):
        return None
    return sol.x


def _refined(dets, cam_poses, rig, X, max_shift):
    Xr = refine_center(dets, cam_poses, rig, X)
    if Xr is None or np.linalg.norm(Xr - X) > max_shift:
        return X
    return Xr


def cross_view_filter(
    detections: dict,
    cam_poses: dict,
    rig: CameraRig,
    max_residual: float = MAX_RESIDUAL,
    max_candidates: int = 4,
) -> FilterResult:
    """Choose, per joint, the largest view combination whose rays agree within ``max_residual``.

    Ties in view count go to the lowest residual. Detections outside the
    chosen set count as dropped. A joint seen in only one view falls back to
    a depth-from-radius estimate flagged as low confidence.
    """
    joints: dict[str, JointEstimate] = {}
    dropped = 0
    missing = []
    total = 0
    for joint in SPHERE_JOINT_NAMES:
        per_view = []
        for v in VIEW_ORDER:
            cands = [d for d in detections.get(v, []) if d.joint_id == joint]
            cands.sort(key=lambda d: -d.area)
            per_view.append(cands[:max_candidates])
            total += len(cands)
            dropped += max(0, len(cands) - max_candidates)
        n_cands = sum(len(c) for c in per_view)
        if n_cands == 0:
            missing.append(joint)
            continue
        # prefer unoccluded views when enough of them agree
        ok_sets = []
        for combo in itertools.product(*[c + [None] for c in per_view]):
            used = tuple(d for d in combo if d is not None)
            if len(used) < 2:
                continue
            try:
                X, res = _triangulate_corrected(used, cam_poses, rig)
            except DegenerateGeometry:
                continue
            if res <= max_residual and all(to_camera(cam_poses[d.view_name], X)[2] > 0 for d in used):
                ok_sets.append((len(used), res, X, used))
        if ok_sets:
            ok_sets.sort(key=lambda s: (-s[0], s[1]))
            n, res, X, used = ok_sets[0]
            clean = tuple(d for d in used if not d.occluded)
            if len(clean) >= 2 and len(clean) < len(used):
                try:
                    Xc, rc = _triangulate_corrected(clean, cam_poses, rig)
                    X, res, used = Xc, rc, clean
                except DegenerateGeometry:
                    pass
            alts = []
            used_ids = {id(d) for d in used}
            for n2, r2, X2, u2 in ok_sets[1:]:
                if not ({id(d) for d in u2} & used_ids) and np.linalg.norm(X2 - X) > max_residual:
                    if all(np.linalg.norm(X2 - a[0]) > max_residual for a in alts):
                        alts.append((X2, r2, u2))
            # a sphere hidden behind a nearer duplicate may survive in one view only
            for d in sorted((d for c in per_view for d in c if id(d) not in used_ids), key=lambda d: (d.occluded, -d.area)):
                if len(alts) >= 2:
                    break
                X2 = _refined((d,), cam_poses, rig, _single_view_center(d, cam_poses, rig), 0.1)
                if all(np.linalg.norm(X2 - Y) > max_residual for Y in [X] + [a[0] for a in alts]):
                    alts.append((X2, float("nan"), (d,)))
            X = _refined(used, cam_poses, rig, X, max_residual)
            alts = [(_refined(u2, cam_poses, rig, X2, max_residual), r2, u2) for X2, r2, u2 in alts[:2]]
            joints[joint] = JointEstimate(joint, X, res, tuple(used), False, tuple(alts))
            dropped += n_cands - len(used)
        else:
            singles = [d for c in per_view for d in c]
            best = max(singles, key=lambda d: (d.confidence, d.area))
            X = _refined((best,), cam_poses, rig, _single_view_center(best, cam_poses, rig), 0.1)
            joints[joint] = JointEstimate(joint, X, float("nan"), (best,), True)
            dropped += n_cands - 1
    if not joints:
        raise NoConsistentSet("no joint has a consistent detection set")
    return FilterResult(joints, dropped, tuple(missing))


# --- stripe phase --------------------------------------------------------


_LUMA = np.array([0.299, 0.587, 0.114])


def _sphere_hits(cam_pose, intr: Intrinsics, center, radius, bbox_pad: int = 1):
    """Pixels whose rays hit the sphere, with the unit surface normals there."""
    bb = render.screen_bbox(cam_pose, intr, center, radius)
    if bb is None:
        return None
    u0, u1, v0, v1 = bb
    vv, uu = np.mgrid[v0:v1, u0:u1]
    d = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones(uu.shape)], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = d @ cam_pose[:3, :3].T
    o = cam_pose[:3, 3]
    t = render._ray_sphere(o, d, np.asarray(center, float), radius)
    hit = np.isfinite(t)
    if not hit.any():
        return None
    p = o + t[hit, None] * d[hit]
    n = (p - center) / radius
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return vv.reshape(-1)[hit], uu.reshape(-1)[hit], n


def angle_scores(
    view: render.ViewImage,
    labels: Labels,
    color_class: str,
    rotation_axis,
    center,
    cam_pose: np.ndarray,
    intr: Intrinsics,
    sphere_radius: float,
    palette: render.Palette = render.DEFAULT_PALETTE,
    n_hyp: int = N_HYPOTHESES,
) -> tuple[np.ndarray, int]:
    """NCC of the observed patch against templates at ``n_hyp`` spin angles.

    Templates are built from the same stripe rule the renderer uses,
    evaluated on the estimated sphere. Returns the score curve and the
    number of pixels compared.
    """
    hits = _sphere_hits(cam_pose, intr, center, sphere_radius)
    if hits is None:
        return np.zeros(n_hyp), 0
    vv, uu, n = hits
    ci = render.Palette.CLASSES.index(color_class)
    c = labels.cls[vv, uu]
    keep = (c == ci) | (c == POLE)
    if keep.sum() < 20:
        return np.zeros(n_hyp), 0
    vv, uu, n = vv[keep], uu[keep], n[keep]
    npx = len(vv)
    # Any visible hemisphere spans a stripe band; a patch with no stripe or
    # pole pixels is rotationally symmetric and carries no phase.
    if np.mean(labels.role[vv, uu] != 0) < MIN_STRIPE_FRACTION:
        return np.zeros(n_hyp), npx
    if npx > MAX_TEMPLATE_PIXELS:
        # an even stride keeps the stripe pattern well sampled
        sel = np.linspace(0, npx - 1, MAX_TEMPLATE_PIXELS).astype(int)
        vv, uu, n = vv[sel], uu[sel], n[sel]
    obs = view.pixels[vv, uu].astype(float) @ _LUMA
    axis = np.asarray(rotation_axis, float)
    axis /= np.linalg.norm(axis)
    r = geo.spin_reference(axis)
    b = np.cross(axis, r)
    th = 2 * math.pi * np.arange(n_hyp) / n_hyp
    s = np.outer((n @ r).astype(np.float32), np.cos(th).astype(np.float32))
    s += np.outer((n @ b).astype(np.float32), np.sin(th).astype(np.float32))
    # one lookup: 30 sub-bands of width 1/15 resolve both the stripe bands and the pole cap
    sub = np.minimum(((s + 1.0) * 15.0).astype(np.int16), 29)
    lum = render.role_colors(palette, color_class) @ _LUMA
    sub_s = (np.arange(30) + 0.5) / 15.0 - 1.0
    table = lum[render.stripe_roles(sub_s, True)].astype(np.float32)
    tmpl = table[sub] * render.sphere_shading(n).astype(np.float32)[:, None]
    m = len(obs)
    oz = (obs - obs.mean()).astype(np.float32)
    t_sum = tmpl.sum(axis=0, dtype=np.float64)
    t_var = (tmpl * tmpl).sum(axis=0, dtype=np.float64) - t_sum * t_sum / m
    cov = (oz @ tmpl).astype(np.float64)
    denom = np.sqrt(np.maximum(t_var, 0.0) * float(oz @ oz))
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(denom > 1e-6 * max(1.0, float(oz @ oz)), cov / denom, 0.0)
    return ncc, npx


def resolve_angle(curve: np.ndarray, margin: float = AMBIGUITY_MARGIN) -> tuple[float, float]:
    """Peak of a score curve; AngleAmbiguous when a rival 90 degrees away is nearly as good."""
    n = len(curve)
    k = int(np.argmax(curve))
    idx = np.arange(n)
    sep = np.abs(idx - k)
    sep = np.minimum(sep, n - sep) * (360.0 / n)
    rival = curve[sep >= 90.0]
    best = float(curve[k])
    if rival.size and best - float(rival.max()) < margin:
        raise AngleAmbiguous(f"best score {best:.3f} vs rival {float(rival.max()):.3f}")
    # parabolic refinement between neighbours
    y0, y1, y2 = curve[(k - 1) % n], curve[k], curve[(k + 1) % n]
    den = y0 - 2 * y1 + y2
    off = 0.5 * (y0 - y2) / den if abs(den) > 1e-12 else 0.0
    return float(geo.wrap_angle(2 * math.pi * (k + np.clip(off, -0.5, 0.5)) / n)), best


def decode_angle(
    view: render.ViewImage,
    detection: Detection,
    rotation_axis,
    center,
    cam_pose: np.ndarray,
    intr: Intrinsics,
    sphere_radius: float,
    palette: render.Palette = render.DEFAULT_PALETTE,
    labels: Labels | None = None,
) -> tuple[float, float]:
    """Spin angle and score of one sphere seen in one view."""
    if detection.radius < ANGLE_MIN_RADIUS:
        raise AngleAmbiguous(f"sphere radius {detection.radius:.1f} px too small for stripe reading")
    if labels is None:
        labels = label_pixels(view.pixels, palette)
    curve, npx = angle_scores(view, labels, detection.color_class, rotation_axis, center, cam_pose, intr, sphere_radius, palette)
    if npx == 0:
        raise AngleAmbiguous("no sphere pixels to match")
    return resolve_angle(curve)


# --- fitting -------------------------------------------------------------


def estimate_joint_target(
    centers: dict,
    arm: ArmModel,
    q_init: JointConfig,
    angles: dict | None = None,
    gripper_state: str = UNKNOWN,
    weights: dict | None = None,
    fit_tolerance: float = FIT_TOLERANCE,
) -> tuple[JointConfig, float]:
    """IK over sphere-joint centres (and optional spin angles), seeded at ``q_init``.

    Returns the fitted configuration and the largest position residual.
    """
    weights = weights or {}
    cons: list = []
    for joint, c in centers.items():
        cons.append(kin.PointConstraint(arm.sphere_joints[joint], np.asarray(c, float), weight=weights.get(joint, 1.0)))
    if len(cons) < 2:
        raise InsufficientConstraints(f"need at least 2 sphere centres, got {len(cons)}")
    gripper = q_init.gripper if gripper_state == UNKNOWN else gripper_state
    seed = JointConfig(arm.clamp(geo.wrap_angle(q_init.q)), gripper)
    res = kin.solve_ik(arm, seed, cons, strict=False)
    if angles:
        poses = kin.forward_kinematics(arm, res.config)
        spin = []
        for joint, a in angles.items():
            f = arm.sphere_joints[joint]
            spin.append(kin.SpinConstraint(f, kin.sphere_axis(arm, poses, f), a))
        res = kin.solve_ik(arm, res.config, cons + spin, strict=False)
    e, _ = kin._residual_and_jacobian(arm, res.config.q, cons, with_jac=False)
    pos_res = float(np.max(np.linalg.norm(e.reshape(-1, 3), axis=1)))
    if pos_res > fit_tolerance:
        raise NonConvergent(f"fit residual {pos_res:.3f} m exceeds {fit_tolerance} m", res, pos_res)
    return res.config, pos_res


def decode_views(
    views: Sequence[render.ViewImage],
    arm: ArmModel,
    rig: CameraRig,
    q_now: JointConfig,
    palette: render.Palette = render.DEFAULT_PALETTE,
    decode_angles: bool = True,
    max_residual: float = MAX_RESIDUAL,
) -> DecodedTargets:
    """Full decode of four target views observed from configuration ``q_now``."""
    ee = kin.forward_kinematics(arm, q_now).ee
    cam_poses = rig_world_poses(rig, ee)
    views = {v.view_name: v for v in views}
    labels = {n: label_pixels(v.pixels, palette) for n, v in views.items()}
    dets = {n: detect_spheres(views[n], palette, labels=labels[n]) for n in views}
    filt = cross_view_filter(dets, cam_poses, rig, max_residual)
    centers = {j: e.center for j, e in filt.joints.items()}
    weights = {j: (0.3 if e.low_confidence else 1.0) for j, e in filt.joints.items()}
    if len(centers) < 2:
        raise InsufficientConstraints(f"only {sorted(centers)} recovered")
    votes = {"open": 0.0, "closed": 0.0}
    if "gripper" in filt.joints:
        for d in filt.joints["gripper"].detections:
            s = classify_gripper(d, palette)
            if s != UNKNOWN:
                votes[s] += d.area
    gripper_state = UNKNOWN if votes["open"] == votes["closed"] else max(votes, key=votes.get)
    q_fit, res = _fit_with_alternatives(filt, centers, weights, arm, q_now, gripper_state)
    spins, scores = {}, {}
    if decode_angles:
        poses = kin.forward_kinematics(arm, q_fit)
        for joint in DECODED_SPIN_JOINTS:
            est = filt.joints.get(joint)
            if est is None or est.low_confidence:
                continue
            f = arm.sphere_joints[joint]
            axis = kin.sphere_axis(arm, poses, f)
            curve = np.zeros(N_HYPOTHESES)
            used = 0
            for d in est.detections:
                if d.radius < ANGLE_MIN_RADIUS:
                    continue
                cam = rig[d.view_name]
                c, npx = angle_scores(
                    views[d.view_name], labels[d.view_name], d.color_class, axis, est.center,
                    cam_poses[d.view_name], cam.intrinsics, cam.sphere_radius, palette,
                )
                if npx:
                    curve += c
                    used += 1
            if not used:
                continue
            try:
                spins[joint], scores[joint] = resolve_angle(curve / used)
            except AngleAmbiguous:
                continue
        if spins:
            q_fit, res = estimate_joint_target(centers, arm, q_fit.with_gripper(q_now.gripper), spins, gripper_state, weights)
    return DecodedTargets(
        centers,
        {j: e.residual for j, e in filt.joints.items()},
        spins,
        gripper_state,
        q_fit,
        res,
        scores,
        dets,
        filt.dropped,
        filt.missing,
    )


def _fit_with_alternatives(filt: FilterResult, centers, weights, arm, q_now, gripper_state):
    """Fit every combination of primary and alternative centres; keep the lowest residual.

    Updates ``centers`` in place with the winning combination.
    """
    names = list(centers)
    options = [[centers[j]] + [X for X, _, _ in filt.joints[j].alternatives] for j in names]
    best, best_pick, last = None, None, None
    for pick in itertools.product(*[range(len(o)) for o in options]):
        trial = {j: options[i][k] for i, (j, k) in enumerate(zip(names, pick))}
        try:
            cand = estimate_joint_target(trial, arm, q_now, None, gripper_state, weights)
        except NonConvergent as exc:
            last = exc
            continue
        if best is None or cand[1] < best[1]:
            best, best_pick = cand, trial
    if best is None:
        raise last
    centers.update(best_pick)
    return best


def decode_tiled(tiled: render.TiledImage, arm: ArmModel, rig: CameraRig, q_now: JointConfig, **kw) -> DecodedTargets:
    return decode_views(render.untile(tiled), arm, rig, q_now, **kw)
