"""Independent reference implementations used only by the tests."""

import math

import numpy as np
from scipy.spatial.transform import Rotation


def homogeneous(R=None, t=None):
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def dh_oracle(a, d, alpha, theta):
    """Standard DH as the product Rz(theta) Tz(d) Tx(a) Rx(alpha)."""
    Rz = homogeneous(Rotation.from_rotvec([0, 0, theta]).as_matrix())
    Tz = homogeneous(t=[0, 0, d])
    Tx = homogeneous(t=[a, 0, 0])
    Rx = homogeneous(Rotation.from_rotvec([alpha, 0, 0]).as_matrix())
    return Rz @ Tz @ Tx @ Rx


def fk_oracle(arm, q):
    """All eight frame transforms, built link by link."""
    T = arm.base_pose.copy()
    out = []
    for i in range(7):
        a, d, alpha, off = arm.dh[i]
        T = T @ dh_oracle(a, d, alpha, q[i] + off)
        out.append(T.copy())
    out.append(T @ arm.tool)
    return np.array(out)


def project_oracle(cam_pose, intr, X):
    """Projection with the 3x4 matrix K [R^T | -R^T t]."""
    R, t = cam_pose[:3, :3], cam_pose[:3, 3]
    P = intr.matrix @ np.hstack([R.T, (-R.T @ t)[:, None]])
    x = P @ np.append(X, 1.0)
    return x[:2] / x[2]


def silhouette_centroid_oracle(cam_pose, intr, center, radius, n=20000):
    """Centre of the silhouette ellipse from densely sampled tangent rays.

    Tangent directions form a cone around the sphere direction; projecting
    the cone's boundary gives points on the ellipse whose bounding-box
    centre equals the conic centre.
    """
    R, t = cam_pose[:3, :3], cam_pose[:3, 3]
    c = R.T @ (np.asarray(center) - t)
    D = np.linalg.norm(c)
    d = c / D
    rho = math.asin(radius / D)
    e1 = np.cross(d, [1.0, 0, 0])
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.cross(d, [0, 1.0, 0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    phi = np.linspace(0, 2 * math.pi, n, endpoint=False)
    rays = math.cos(rho) * d[None] + math.sin(rho) * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
    u = intr.cx + intr.fx * rays[:, 0] / rays[:, 2]
    v = intr.cy + intr.fy * rays[:, 1] / rays[:, 2]
    # conic centre = midpoint of the extreme points along any two axes
    return 0.5 * (u.max() + u.min()), 0.5 * (v.max() + v.min())


def ensemble_oracle(values, m):
    """Direct evaluation of sum_i exp(-m i) a_i / sum_i exp(-m i)."""
    num = sum(math.exp(-m * i) * np.asarray(v, float) for i, v in enumerate(values))
    den = sum(math.exp(-m * i) for i in range(len(values)))
    return num / den


def round_half_up_1(x):
    """One decimal, ties away from zero, via exact rational arithmetic."""
    from fractions import Fraction

    f = abs(Fraction(repr(float(x)))) * 10
    n = math.floor(f + Fraction(1, 2))
    sign = "-" if x < 0 and n else ""
    return f"{sign}{n // 10}.{n % 10}"
