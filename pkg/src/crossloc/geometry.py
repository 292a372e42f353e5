"""Rigid transforms, pinhole projection, triangulation, depth reprojection.

Pose convention throughout: camera-from-world, x_cam = R @ x_world + t.
All values are immutable after construction; every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


class InvalidDepthError(GeometryError):
    pass


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    """Flip the quaternion so its first nonzero component is positive."""
    for c in q:
        if c != 0.0:
            return q if c > 0.0 else -q
    raise GeometryError("zero quaternion")


@dataclass(frozen=True)
class Rotation:
    """Unit quaternion (w, x, y, z); q and -q represent the same rotation."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise GeometryError("zero quaternion")
        object.__setattr__(self, "q", _canonical_sign(q / n))
        self.q.setflags(write=False)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_axis_angle(axis: np.ndarray, angle_rad: float) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            if abs(angle_rad) > 1e-12:
                raise GeometryError("zero axis with nonzero angle")
            return Rotation.identity()
        axis = axis / n
        half = 0.5 * angle_rad
        return Rotation(np.concatenate([[np.cos(half)], np.sin(half) * axis]))

    @staticmethod
    def from_rotvec(rotvec: np.ndarray) -> "Rotation":
        rotvec = np.asarray(rotvec, dtype=np.float64).reshape(3)
        angle = np.linalg.norm(rotvec)
        if angle < 1e-12:
            # first-order quaternion keeps tiny updates exact to O(angle^2)
            return Rotation(np.concatenate([[1.0], 0.5 * rotvec]))
        return Rotation.from_axis_angle(rotvec / angle, angle)

    @staticmethod
    def from_matrix(R: np.ndarray) -> "Rotation":
        """Shepperd's method, numerically stable for all trace values."""
        R = np.asarray(R, dtype=np.float64)
        trace = R[0, 0] + R[1, 1] + R[2, 2]
        if trace > 0:
            s = 0.5 / np.sqrt(trace + 1.0)
            w = 0.25 / s
            x = (R[2, 1] - R[1, 2]) * s
            y = (R[0, 2] - R[2, 0]) * s
            z = (R[1, 0] - R[0, 1]) * s
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
        return Rotation(np.array([w, x, y, z]))

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ])

    def compose(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def inverse(self) -> "Rotation":
        return Rotation(self.q * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.as_matrix().T

    def angle_deg(self) -> float:
        """Rotation angle of this rotation itself, in [0, 180] degrees."""
        w = min(abs(float(self.q[0])), 1.0)
        return float(np.degrees(2.0 * np.arccos(w)))


@dataclass(frozen=True)
class Pose:
    """Camera-from-world rigid transform: x_cam = R @ x_world + t."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)
        t.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.as_matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: x -> R_self (R_other x + t_other) + t_self."""
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def camera_center(self) -> np.ndarray:
        """World position of the optical center, C = -R^T t."""
        return -self.rotation.inverse().apply(self.translation)


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def K(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth; non-positive or non-finite values are invalid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise GeometryError("depth map must be a 2-D array")
        object.__setattr__(self, "values", v)
        v.setflags(write=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values) & (self.values > 0)


_MIN_Z = 1e-6


def project(K: CameraIntrinsics, T: Pose, X_world: np.ndarray) -> np.ndarray | None:
    """Project one world point; returns (u, v) or None when behind the camera."""
    x = T.apply(np.asarray(X_world, dtype=np.float64).reshape(3))
    if x[2] <= _MIN_Z:
        return None
    return np.array([K.fx * x[0] / x[2] + K.cx, K.fy * x[1] / x[2] + K.cy])


def project_points(
    K: CameraIntrinsics, T: Pose, X_world: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) world points.

    Returns (uv, in_front): uv is (N, 2) with NaN rows where in_front is False.
    """
    X_world = np.asarray(X_world, dtype=np.float64).reshape(-1, 3)
    x = T.apply(X_world)
    in_front = x[:, 2] > _MIN_Z
    uv = np.full((len(x), 2), np.nan)
    z = x[in_front, 2]
    uv[in_front, 0] = K.fx * x[in_front, 0] / z + K.cx
    uv[in_front, 1] = K.fy * x[in_front, 1] / z + K.cy
    return uv, in_front


def backproject(K: CameraIntrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Lift a pixel at metric depth into the camera frame."""
    if depth <= 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def backproject_depth_map(K: CameraIntrinsics, depth: DepthMap) -> np.ndarray:
    """All valid depth pixels as an (N, 3) camera-frame point cloud.

    Pixels are sampled at their centers in row-major order of the valid mask.
    """
    mask = depth.valid_mask()
    vv, uu = np.nonzero(mask)
    d = depth.values[vv, uu]
    x = (uu + 0.5 - K.cx) / K.fx * d
    y = (vv + 0.5 - K.cy) / K.fy * d
    return np.column_stack([x, y, d])


def transform_depth_to_query(
    depth: DepthMap, K_src: CameraIntrinsics, T_src: Pose, T_q: Pose
) -> np.ndarray:
    """Re-express a source camera's depth map in the query camera frame.

    Both poses must be camera-from-world over one shared world frame.
    Returns an (N, 3) cloud; all-invalid depth yields an empty cloud.
    """
    cloud_src = backproject_depth_map(K_src, depth)
    if len(cloud_src) == 0:
        return cloud_src
    src_to_query = T_q.compose(T_src.inverse())
    return src_to_query.apply(cloud_src)


def rotation_angle_deg(a: Rotation, b: Rotation) -> float:
    """Angle of the relative rotation between two rotations, in degrees."""
    rel = a.inverse().compose(b)
    return rel.angle_deg()


def _dlt_rows(K: CameraIntrinsics, T: Pose, pixel: np.ndarray) -> np.ndarray:
    P = K.K() @ T.as_matrix()[:3, :]
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    return np.array([u * P[2] - P[0], v * P[2] - P[1]])


def triangulate_multiview(
    observations: list[tuple[CameraIntrinsics, Pose, np.ndarray]],
    min_angle_deg: float = 1.5,
) -> np.ndarray | None:
    """DLT triangulation over >=2 views; None when degenerate.

    Degenerate = max pairwise triangulation angle below min_angle_deg, or the
    point fails the cheirality check in any view.
    """
    if len(observations) < 2:
        return None
    A = np.vstack([_dlt_rows(K, T, p) for K, T, p in observations])
    _, _, vh = np.linalg.svd(A)
    Xh = vh[-1]
    if abs(Xh[3]) < 1e-12:
        return None
    X = Xh[:3] / Xh[3]

    centers = [T.camera_center() for _, T, _ in observations]
    for _, T, _ in observations:
        if T.apply(X)[2] <= _MIN_Z:
            return None
    max_angle = 0.0
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            r1 = X - centers[i]
            r2 = X - centers[j]
            n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
            if n1 < 1e-12 or n2 < 1e-12:
                return None
            cosang = np.clip(r1 @ r2 / (n1 * n2), -1.0, 1.0)
            max_angle = max(max_angle, np.degrees(np.arccos(cosang)))
    if max_angle < min_angle_deg:
        return None
    return X


def triangulate(
    K1: CameraIntrinsics, T1: Pose, p1: np.ndarray,
    K2: CameraIntrinsics, T2: Pose, p2: np.ndarray,
    min_angle_deg: float = 1.5,
) -> np.ndarray | None:
    return triangulate_multiview([(K1, T1, p1), (K2, T2, p2)], min_angle_deg)
