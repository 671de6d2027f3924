import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointcanvas import camera as cam
from jointcanvas import geometry as geo
from jointcanvas.errors import BehindCamera, DegenerateGeometry, OutOfBounds

from oracles import project_oracle, silhouette_centroid_oracle

INTR = cam.Intrinsics()
POSE = geo.look_at([1.5, 0.2, 0.8], [0.4, 0.0, 0.3])

coord = st.floats(-0.4, 0.4, allow_nan=False)


class TestProjection:
    @given(coord, coord, coord)
    def test_matches_projection_matrix(self, x, y, z):
        X = np.array([0.4 + x, y, 0.3 + z])
        assert np.allclose(cam.project(POSE, INTR, X), project_oracle(POSE, INTR, X), atol=1e-9)

    def test_principal_point_on_axis(self):
        X = POSE[:3, 3] + 0.7 * POSE[:3, 2]
        u, v = cam.project(POSE, INTR, X)
        assert math.isclose(u, 127.5) and math.isclose(v, 127.5)

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            cam.project(POSE, INTR, POSE[:3, 3] - POSE[:3, 2])

    def test_project_many_marks_behind_as_nan(self):
        pts = np.array([POSE[:3, 3] + POSE[:3, 2], POSE[:3, 3] - POSE[:3, 2]])
        uv = cam.project_many(POSE, INTR, pts)
        assert np.all(np.isfinite(uv[0])) and np.all(np.isnan(uv[1]))

    @given(st.floats(0, 255), st.floats(0, 255), st.floats(0.2, 3.0))
    def test_pixel_ray_reprojects(self, u, v, depth):
        r = cam.pixel_ray(POSE, INTR, (u, v))
        X = r.at(depth)
        assert np.allclose(cam.project(POSE, INTR, X), (u, v), atol=1e-7)

    def test_pixel_ray_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            cam.pixel_ray(POSE, INTR, (300, 10))

    def test_invalid_intrinsics(self):
        with pytest.raises(ValueError):
            cam.Intrinsics(fx=-1)
        with pytest.raises(ValueError):
            cam.Intrinsics(cx=300)


class TestTriangulation:
    def test_exact_rays_recover_point(self, rig):
        X = np.array([0.5, 0.1, 0.4])
        rays = []
        for name in ("front", "left_shoulder", "right_shoulder"):
            P = rig[name].mount
            rays.append(cam.pixel_ray(P, INTR, cam.project(P, INTR, X)))
        Y, rms = cam.triangulate(rays)
        assert np.linalg.norm(X - Y) < 1e-9 and rms < 1e-9

    def test_parallel_rays_degenerate(self):
        rays = [cam.Ray(np.zeros(3), [1, 0, 0]), cam.Ray(np.array([0, 1.0, 0]), [1, 0, 0])]
        with pytest.raises(DegenerateGeometry):
            cam.triangulate(rays)

    def test_single_ray_degenerate(self):
        with pytest.raises(DegenerateGeometry):
            cam.triangulate([cam.Ray(np.zeros(3), [1, 0, 0])])

    def test_rms_is_point_ray_distance(self):
        rays = [cam.Ray(np.zeros(3), [1, 0, 0]), cam.Ray(np.array([0, 0, 0.1]), [0, 1, 0])]
        X, rms = cam.triangulate(rays)
        assert np.allclose(X, [0, 0, 0.05])
        assert math.isclose(rms, 0.05)


class TestSilhouette:
    @given(coord, coord, st.floats(0.02, 0.1))
    @settings(max_examples=30)
    def test_ellipse_centre_matches_tangent_cone(self, x, y, r):
        c = np.array([0.4 + x, y, 0.4])
        got = cam.sphere_ellipse_center(POSE, INTR, c, r)
        want = silhouette_centroid_oracle(POSE, INTR, c, r)
        assert np.allclose(got, want, atol=2e-3)

    def test_offcentre_sphere_is_biased_outward(self):
        # perspective pushes the silhouette centre away from the principal point
        c = POSE[:3, 3] + 0.8 * POSE[:3, 2] + 0.3 * POSE[:3, 0]
        u_c, _ = cam.project(POSE, INTR, c)
        u_e, _ = cam.sphere_ellipse_center(POSE, INTR, c, 0.08)
        assert u_e > u_c > 127.5

    def test_camera_inside_sphere(self):
        assert cam.sphere_ellipse_center(POSE, INTR, POSE[:3, 3], 0.1) is None


class TestRig:
    def test_view_order_and_wrist_mount(self, rig):
        assert tuple(rig.cameras) == cam.VIEW_ORDER
        ee = geo.transform(t=[0.5, 0, 0.3])
        poses = cam.rig_world_poses(rig, ee)
        assert np.allclose(poses["wrist"], ee @ rig["wrist"].mount)
        assert np.allclose(poses["front"], rig["front"].mount)

    def test_offsets_leave_wrist_alone(self, rig):
        off = geo.transform(geo.rotation([0, 0, 1], 0.1), [0.05, 0, 0])
        moved = rig.with_offsets({"front": off, "wrist": off})
        assert np.allclose(moved["wrist"].mount, rig["wrist"].mount)
        assert np.allclose(moved["front"].mount[:3, 3], rig["front"].mount[:3, 3] + [0.05, 0, 0])

    def test_rig_requires_order(self, rig):
        cams = dict(reversed(list(rig.cameras.items())))
        with pytest.raises(ValueError):
            cam.CameraRig(cams)
