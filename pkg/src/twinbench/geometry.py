"""Rigid-body math, pinhole camera model, and point-cloud primitives.

Conventions used throughout the package:
  - quaternions are scalar-first (w, x, y, z) and kept unit-norm
  - camera frame: +x right, +y down, +z forward into the scene
  - all lengths are meters; millimeters appear only at UI boundaries
  - depth value 0.0 marks an invalid depth pixel
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_QUAT_NORM_TOL = 1e-9


class InvalidDepthError(ValueError):
    """Pixel rejected: non-positive or invalid (0-coded) depth."""


class BehindCameraError(ValueError):
    """Point with z <= 0 cannot be projected."""


def _as_vec(x, n, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (n,):
        raise ValueError(f"{name} must be a {n}-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Pose6:
    """Rigid transform: unit-quaternion rotation plus translation in meters.

    Maps points from the pose's source frame into its target frame via
    R @ p + t. Composition chains right-to-left like matrices.
    """

    quat: np.ndarray  # (w, x, y, z), unit norm
    trans: np.ndarray  # meters

    def __post_init__(self):
        q = _as_vec(self.quat, 4, "quat")
        t = _as_vec(self.trans, 3, "trans")
        n = float(np.linalg.norm(q))
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        q = q / n
        if q[0] < 0.0:  # canonical sign, keeps serialization deterministic
            q = -q
        object.__setattr__(self, "quat", _frozen(q))
        object.__setattr__(self, "trans", _frozen(t))

    @staticmethod
    def identity() -> "Pose6":
        return Pose6(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, trans=(0.0, 0.0, 0.0)) -> "Pose6":
        a = _as_vec(axis, 3, "axis")
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise ValueError("zero-length rotation axis")
        a = a / n
        half = 0.5 * angle_rad
        q = np.concatenate(([np.cos(half)], np.sin(half) * a))
        return Pose6(q, np.asarray(trans, dtype=np.float64))

    @staticmethod
    def from_matrix(rot: np.ndarray, trans) -> "Pose6":
        """Build from a 3x3 rotation matrix (Shepperd's method)."""
        m = np.asarray(rot, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        tr = np.trace(m)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2.0
            q = np.array([0.25 * s,
                          (m[2, 1] - m[1, 2]) / s,
                          (m[0, 2] - m[2, 0]) / s,
                          (m[1, 0] - m[0, 1]) / s])
        else:
            i = int(np.argmax(np.diag(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2.0
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + k] = (m[k, i] + m[i, k]) / s
        return Pose6(q, np.asarray(trans, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map one (3,) point or an (N, 3) block through R @ p + t."""
        p = np.asarray(points, dtype=np.float64)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        out = p @ self.rotation_matrix().T + self.trans
        return out[0] if single else out

    def compose(self, other: "Pose6") -> "Pose6":
        """self after other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return Pose6(quat_multiply(self.quat, other.quat),
                     self.apply(other.trans))

    def inverse(self) -> "Pose6":
        qc = quat_conjugate(self.quat)
        return Pose6(qc, -quat_rotate(qc, self.trans))

    def __repr__(self):
        q = ", ".join(f"{v:.9g}" for v in self.quat)
        t = ", ".join(f"{v:.9g}" for v in self.trans)
        return f"Pose6(quat=({q}), trans=({t}))"


def quat_multiply(q1, q0) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w0, x0, y0, z0 = q0
    return np.array([
        w1 * w0 - x1 * x0 - y1 * y0 - z1 * z0,
        w1 * x0 + x1 * w0 + y1 * z0 - z1 * y0,
        w1 * y0 - x1 * z0 + y1 * w0 + z1 * x0,
        w1 * z0 + x1 * y0 - y1 * x0 + z1 * w0,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate a 3-vector by a unit quaternion without building the matrix."""
    qv = np.array([0.0, v[0], v[1], v[2]])
    return quat_multiply(quat_multiply(q, qv), quat_conjugate(q))[1:]


def compose_pose(a: Pose6, b: Pose6) -> Pose6:
    return a.compose(b)


def invert_pose(a: Pose6) -> Pose6:
    return a.inverse()


def pose_error(a: Pose6, b: Pose6) -> tuple[float, float]:
    """Translation error in meters and geodesic rotation error in degrees."""
    dt = float(np.linalg.norm(a.trans - b.trans))
    dot = abs(float(np.dot(a.quat, b.quat)))
    ang = 2.0 * np.arccos(min(dot, 1.0))
    return dt, float(np.degrees(ang))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")


def back_project(pixel, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel with depth into a camera-frame 3D point.

    Returns ((u - cx) * d / fx, (v - cy) * d / fy, d).
    """
    if not (np.isfinite(depth) and depth > 0.0):
        raise InvalidDepthError(f"depth {depth!r} is not a positive finite value")
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ValueError(f"pixel ({u}, {v}) outside {intrinsics.width}x{intrinsics.height} image")
    return np.array([
        (u - intrinsics.cx) * depth / intrinsics.fx,
        (v - intrinsics.cy) * depth / intrinsics.fy,
        depth,
    ])


def back_project_pixels(us, vs, depths, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized back-projection of matched pixel/depth arrays to (N, 3)."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
        raise InvalidDepthError("all depths must be positive and finite")
    return np.column_stack([
        (us - intrinsics.cx) * d / intrinsics.fx,
        (vs - intrinsics.cy) * d / intrinsics.fy,
        d,
    ])


def project(point, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixel coordinates."""
    p = _as_vec(point, 3, "point")
    if p[2] <= 0.0:
        raise BehindCameraError(f"point z={p[2]} is not in front of the camera")
    return np.array([
        intrinsics.fx * p[0] / p[2] + intrinsics.cx,
        intrinsics.fy * p[1] / p[2] + intrinsics.cy,
    ])


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in meters, camera frame, shape (N, 3)."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", _frozen(p))

    def __len__(self):
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("empty cloud has no centroid")
        return self.points.mean(axis=0)


def transform_points(pose: Pose6, cloud: PointCloud) -> PointCloud:
    return PointCloud(pose.apply(cloud.points))


@dataclass(frozen=True, eq=False)
class ModelPrior:
    """Vertex samples of an object model plus grasp/place affordance points.

    Vertices live in the model frame (object center at the origin). A
    pose-estimable model needs >= 4 non-coplanar vertices so rigid
    registration is well-posed.
    """

    model_id: str
    vertices: np.ndarray  # (N, 3) meters, model frame
    grasp_point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    place_point: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if v.shape[0] < 4:
            raise ValueError("pose-estimable model needs at least 4 vertices")
        centered = v - v.mean(axis=0)
        cov = centered.T @ centered
        if np.linalg.matrix_rank(cov, tol=1e-12) < 3:
            raise ValueError("model vertices are coplanar; pose estimation is degenerate")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "grasp_point", _frozen(_as_vec(self.grasp_point, 3, "grasp_point")))
        if self.place_point is not None:
            object.__setattr__(self, "place_point", _frozen(_as_vec(self.place_point, 3, "place_point")))
