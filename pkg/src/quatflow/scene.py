"""Geometry for annotated scenes: masked point clouds, statistical outlier
removal, oriented 3D bounding boxes with a canonical vertex order, object
keypoints and distances, and pinhole backprojection.

Point clouds are (M, 3) arrays in the camera frame (affine-invariant
units; +z away from the camera).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import (
    BehindCamera,
    DegenerateCloud,
    EmptyCloud,
    EmptyMask,
    ShapeMismatch,
    TooFewPoints,
)

_EXTENT_FLOOR = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class PointMap:
    """Dense per-pixel 3D points with a validity mask."""

    points: np.ndarray  # (H, W, 3)
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "validity", np.asarray(self.validity, dtype=bool))
        h, w = self.validity.shape
        if self.points.shape != (h, w, 3):
            raise ShapeMismatch(f"points {self.points.shape} vs validity {self.validity.shape}")

    @property
    def height(self) -> int:
        return self.validity.shape[0]

    @property
    def width(self) -> int:
        return self.validity.shape[1]


@dataclass(frozen=True)
class SceneObject:
    """A labeled object: segmentation mask plus its masked point cloud."""

    label: str
    mask: np.ndarray  # (H, W) bool
    cloud: np.ndarray  # (M, 3), derived from the point map

    @staticmethod
    def from_point_map(label: str, mask, pm: PointMap) -> "SceneObject":
        return SceneObject(label=label, mask=np.asarray(mask, dtype=bool),
                           cloud=masked_points(pm, mask))


@dataclass(frozen=True)
class OrientedBox3D:
    """Oriented bounding box: center, right-handed axes columns, extents."""

    center: np.ndarray  # (3,)
    axes: np.ndarray  # (3, 3), orthonormal columns, det +1
    extents: np.ndarray  # (3,), positive

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "axes", np.asarray(self.axes, dtype=float))
        object.__setattr__(
            self, "extents", np.maximum(np.asarray(self.extents, dtype=float), _EXTENT_FLOOR)
        )

    @property
    def vertices(self) -> np.ndarray:
        """The 8 corners in canonical order (see ``order_vertices``)."""
        return order_vertices(self)


def masked_points(pm: PointMap, mask) -> np.ndarray:
    """All valid points under the mask, row-major order."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != self_shape(pm):
        raise ShapeMismatch(f"mask {mask.shape} vs point map {self_shape(pm)}")
    sel = mask & pm.validity
    if not np.any(sel):
        raise EmptyMask("mask selects no valid point")
    return pm.points[sel]


def self_shape(pm: PointMap) -> tuple[int, int]:
    return pm.validity.shape


def remove_outliers(cloud, k: int = 20, ratio: float = 2.0) -> np.ndarray:
    """Statistical outlier removal by k-nearest-neighbor mean distance.

    Points whose mean distance to their k nearest neighbors exceeds
    (global mean + ratio * global std) of those per-point means are
    dropped.
    """
    cloud = np.asarray(cloud, dtype=float)
    if cloud.shape[0] <= k:
        raise TooFewPoints(f"need more than k={k} points, got {cloud.shape[0]}")
    dists, _ = cKDTree(cloud).query(cloud, k=k + 1)
    mean_d = dists[:, 1:].mean(axis=1)  # first neighbor is the point itself
    threshold = mean_d.mean() + ratio * mean_d.std()
    return cloud[mean_d <= threshold]


def _min_area_rectangle(pts2d):
    """Min-area enclosing rectangle of 2D points (edge-aligned search).

    Returns (u, v, extent_u, extent_v, area) with u, v unit 2-vectors.
    """
    hull = ConvexHull(pts2d)
    vp = pts2d[hull.vertices]
    best = None
    for i in range(len(vp)):
        e = vp[(i + 1) % len(vp)] - vp[i]
        norm = np.hypot(e[0], e[1])
        if norm < 1e-15:
            continue
        u = e / norm
        v = np.array([-u[1], u[0]])
        pu = vp @ u
        pv = vp @ v
        du = pu.max() - pu.min()
        dv = pv.max() - pv.min()
        area = du * dv
        if best is None or area < best[4] - 1e-15 * max(1.0, best[4]):
            best = (u, v, du, dv, area)
    if best is None:
        raise DegenerateCloud("projected points are collinear")
    return best


def _perp_frame(n):
    """Deterministic orthonormal (u, v) perpendicular to unit vector n."""
    pick = np.argmin(np.abs(n))
    axis = np.zeros(3)
    axis[pick] = 1.0
    u = axis - (axis @ n) * n
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _box_from_axes(cloud, axes) -> OrientedBox3D:
    proj = (cloud - cloud.mean(axis=0)) @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    center = cloud.mean(axis=0) + axes @ ((lo + hi) / 2)
    return OrientedBox3D(center=center, axes=axes, extents=hi - lo)


def _right_handed(a, b, c):
    axes = np.column_stack([a, b, c])
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    return axes


def _candidate_key(box: OrientedBox3D):
    return np.round(order_vertices(box), 9).tobytes()


def _pca_axes(centered):
    cov = centered.T @ centered / centered.shape[0]
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    if w[1] <= 1e-12 * max(w[0], 1e-30):
        raise DegenerateCloud("point cloud is collinear")
    a1, a2 = v[:, 0], v[:, 1]
    # Deterministic sign: largest-magnitude component positive.
    if a1[np.argmax(np.abs(a1))] < 0:
        a1 = -a1
    if a2[np.argmax(np.abs(a2))] < 0:
        a2 = -a2
    return _right_handed(a1, a2, np.cross(a1, a2))


def _planar_box(cloud, centered) -> OrientedBox3D:
    cov = centered.T @ centered / centered.shape[0]
    w, v = np.linalg.eigh(cov)
    if w[1] <= 1e-12 * max(w[2], 1e-30):
        raise DegenerateCloud("point cloud is collinear")
    n = v[:, 0]
    u0, v0 = _perp_frame(n)
    u2, v2, _, _, _ = _min_area_rectangle(np.column_stack([cloud @ u0, cloud @ v0]))
    au = u2[0] * u0 + u2[1] * v0
    av = v2[0] * u0 + v2[1] * v0
    return _box_from_axes(cloud, _right_handed(au, av, n))


def oriented_bbox(cloud, method: str = "min_volume") -> OrientedBox3D:
    """Oriented bounding box of a point cloud.

    ``min_volume`` (default) searches boxes flush with a convex-hull face,
    the minimum-area rectangle in the perpendicular plane giving the other
    two axes; exact for box-shaped clouds regardless of eigenvalue ties.
    ``pca`` uses principal axes of the covariance with a deterministic
    sign rule (cheaper, but cannot orient clouds with isotropic
    covariance, e.g. cubes).
    """
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 4:
        raise DegenerateCloud("need at least 4 points with 3 coordinates")
    centered = cloud - cloud.mean(axis=0)
    if method == "pca":
        return _box_from_axes(cloud, _pca_axes(centered))
    if method != "min_volume":
        raise ValueError(f"unknown method: {method}")
    try:
        hull = ConvexHull(cloud)
    except QhullError:
        return _planar_box(cloud, centered)
    hull_pts = cloud[hull.vertices]
    normals = hull.equations[:, :3]
    normals = np.unique(np.round(normals, 9), axis=0)
    best = None
    best_key = None
    for n in normals:
        n = n / np.linalg.norm(n)
        u0, v0 = _perp_frame(n)
        try:
            u2, v2, du, dv, area = _min_area_rectangle(
                np.column_stack([hull_pts @ u0, hull_pts @ v0])
            )
        except QhullError:
            continue
        depth = hull_pts @ n
        volume = area * max(depth.max() - depth.min(), _EXTENT_FLOOR)
        au = u2[0] * u0 + u2[1] * v0
        av = v2[0] * u0 + v2[1] * v0
        box = _box_from_axes(cloud, _right_handed(au, av, n))
        if best is None or volume < best[0] * (1 - 1e-9):
            best, best_key = (volume, box), None
        elif volume <= best[0] * (1 + 1e-9):
            # Volume tie: keep the candidate with the smaller canonical
            # vertex list so the result is independent of face order.
            if best_key is None:
                best_key = _candidate_key(best[1])
            key = _candidate_key(box)
            if key < best_key:
                best, best_key = (volume, box), key
    if best is None:
        return _planar_box(cloud, centered)
    return best[1]


def order_vertices(box: OrientedBox3D) -> np.ndarray:
    """Canonically ordered corners of an oriented box.

    Corner 0 is the lexicographic minimum by (z, y, x) in the camera
    frame.  The remaining corners enumerate the local sign patterns
    (---, --+, -+-, -++, +--, +-+, ++-, +++) over the three edge
    directions leaving corner 0, those directions themselves ordered by
    the (z, y, x) key of the corner they lead to.  Any representation of
    the same geometric box (axes permuted or flipped) yields the same
    list.
    """
    half = box.extents / 2.0
    signs = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
    )
    corners = box.center + (signs * half) @ box.axes.T
    keys = [tuple(c[::-1]) for c in corners]  # compare by (z, y, x)
    i0 = min(range(8), key=lambda i: keys[i])
    v0 = corners[i0]
    s0 = signs[i0]
    edges = [-s0[i] * box.extents[i] * box.axes[:, i] for i in range(3)]
    edges.sort(key=lambda d: tuple((v0 + d)[::-1]))
    out = np.empty((8, 3))
    for b1 in range(2):
        for b2 in range(2):
            for b3 in range(2):
                out[b1 * 4 + b2 * 2 + b3] = (
                    v0 + b1 * edges[0] + b2 * edges[1] + b3 * edges[2]
                )
    return out


def keypoints(cloud) -> dict:
    """Closest/furthest points from the camera origin plus the centroid."""
    cloud = np.asarray(cloud, dtype=float)
    if cloud.size == 0:
        raise EmptyCloud("empty point cloud")
    norms = np.linalg.norm(cloud, axis=1)
    return {
        "closest": cloud[np.argmin(norms)],
        "furthest": cloud[np.argmax(norms)],
        "center": cloud.mean(axis=0),
    }


def object_distance(a: SceneObject, b: SceneObject) -> dict:
    """Centroid-to-centroid offset and its Euclidean norm."""
    if a.cloud.size == 0 or b.cloud.size == 0:
        raise EmptyCloud("empty object cloud")
    components = b.cloud.mean(axis=0) - a.cloud.mean(axis=0)
    return {"direct": float(np.linalg.norm(components)), "components": components}


def bbox_vertex_distances(a: OrientedBox3D, b: OrientedBox3D) -> dict:
    """Per-index vertex offsets b - a (canonical order) plus center offset."""
    return {
        "vertex_offsets": order_vertices(b) - order_vertices(a),
        "center_offset": b.center - a.center,
    }


def backproject(points, k: Intrinsics) -> np.ndarray:
    """Project camera-frame points to pixel coordinates (u, v)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    z = points[:, 2]
    if np.any(z <= 1e-6):
        raise BehindCamera("point depth must exceed 1e-6")
    u = k.fx * points[:, 0] / z + k.cx
    v = k.fy * points[:, 1] / z + k.cy
    return np.column_stack([u, v])


def compare_depths(a: SceneObject, b: SceneObject) -> dict:
    """Centroid distances to the camera and which object is closer."""
    if a.cloud.size == 0 or b.cloud.size == 0:
        raise EmptyCloud("empty object cloud")
    da = float(np.linalg.norm(a.cloud.mean(axis=0)))
    db = float(np.linalg.norm(b.cloud.mean(axis=0)))
    tie = abs(da - db) < 1e-12
    if tie:
        closer = min(a.label, b.label)
    else:
        closer = a.label if da < db else b.label
    return {"dist_a": da, "dist_b": db, "closer": closer, "tie": tie}


def filter_duplicates(objects) -> list:
    """Drop every object whose label appears more than once (all copies)."""
    labels = [o.label for o in objects]
    return [o for o in objects if labels.count(o.label) == 1]
