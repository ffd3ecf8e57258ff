"""Small geometric solvers shared by calibration and filter initialization."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometryError


def trilaterate3(anchors, dists, sign: int = +1) -> np.ndarray:
    """Closed-form intersection of three spheres.

    Three anchors leave a mirror ambiguity through their plane; ``sign``
    picks the root on the positive (+1) or negative (-1) side of the plane
    normal (p1 - p0) x (p2 - p0). A negative sphere-intersection discriminant
    (tangent or noisy data) clamps to the plane.
    """
    p = np.asarray(anchors, dtype=float)
    r = np.asarray(dists, dtype=float)
    if p.shape != (3, 3) or r.shape != (3,):
        raise DegenerateGeometryError("trilaterate3 needs 3 anchors and 3 ranges")
    ex = p[1] - p[0]
    d = np.linalg.norm(ex)
    if d < 1e-9:
        raise DegenerateGeometryError("anchors 0 and 1 coincide")
    ex = ex / d
    rel2 = p[2] - p[0]
    i = ex @ rel2
    ey = rel2 - i * ex
    j = np.linalg.norm(ey)
    if j < 1e-9:
        raise DegenerateGeometryError("anchors are collinear")
    ey = ey / j
    ez = np.cross(ex, ey)
    x = (r[0] ** 2 - r[1] ** 2 + d ** 2) / (2 * d)
    y = (r[0] ** 2 - r[2] ** 2 + i ** 2 + j ** 2) / (2 * j) - (i / j) * x
    z2 = r[0] ** 2 - x ** 2 - y ** 2
    z = np.sqrt(z2) if z2 > 0 else 0.0
    return p[0] + x * ex + y * ey + sign * z * ez


def multilaterate(anchors, dists, iterations: int = 8) -> np.ndarray:
    """Least-squares position from four or more ranges.

    Linearizes pairwise sphere differences for a starting point, then runs a
    few Gauss-Newton polishing steps on the range residuals.
    """
    p = np.asarray(anchors, dtype=float)
    r = np.asarray(dists, dtype=float)
    if len(p) < 4:
        raise DegenerateGeometryError("multilaterate needs at least 4 anchors")
    A = 2.0 * (p[0] - p[1:])
    b = (r[1:] ** 2 - r[0] ** 2) - np.sum(p[1:] ** 2, axis=1) + p[0] @ p[0]
    x0, *_ = np.linalg.lstsq(A, -b, rcond=None)

    def sq_residual(x):
        return float(np.sum((np.linalg.norm(x - p, axis=1) - r) ** 2))

    x = x0
    for _ in range(iterations):
        diff = x - p
        dist = np.linalg.norm(diff, axis=1)
        dist = np.maximum(dist, 1e-9)
        J = diff / dist[:, None]
        resid = dist - r
        dx, *_ = np.linalg.lstsq(J, -resid, rcond=None)
        x = x + dx
        if np.linalg.norm(dx) < 1e-12:
            break
    # Gauss-Newton can shoot off from a poor linear seed; never return a
    # point that fits worse than the seed itself.
    return x if sq_residual(x) <= sq_residual(x0) else x0


def rigid_align(src, dst):
    """Proper rigid transform (no reflection) mapping src points onto dst.

    Returns (R, t) minimizing ||R src_i + t - dst_i||^2 with det(R) = +1
    (Kabsch via SVD).
    """
    A = np.asarray(src, dtype=float)
    B = np.asarray(dst, dtype=float)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, sign])
    R = Vt.T @ D @ U.T
    t = cb - R @ ca
    return R, t


def reflect_through_plane(points, origin, normal) -> np.ndarray:
    """Mirror points through the plane defined by a point and unit normal."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    d = (pts - origin) @ n
    out = pts - 2.0 * d[:, None] * n
    return out.reshape(np.shape(points))
