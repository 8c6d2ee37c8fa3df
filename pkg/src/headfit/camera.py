"""Cameras, rigid/similarity transforms and point alignment.

Conventions used throughout the package:

- world-to-camera mapping is ``x_cam = R @ x_world + t`` with the camera
  looking along +z,
- image origin at the top-left corner, ``u`` along columns, ``v`` along rows,
- pixel ``(row, col)`` covers the unit square whose center is
  ``(u, v) = (col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, InvalidInputError

# Depth below this counts as "behind the camera" for projection purposes.
DEPTH_EPS = 1e-9

# Orthonormality / unit-determinant tolerance for rotations.
ROTATION_TOL = 1e-9


def _check_rotation(rotation: np.ndarray, what: str) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise InvalidInputError(f"{what}: rotation must be 3x3, got {rotation.shape}")
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if err > ROTATION_TOL:
        raise InvalidInputError(f"{what}: rotation not orthonormal (deviation {err:.3g})")
    det = np.linalg.det(rotation)
    if abs(det - 1.0) > ROTATION_TOL:
        raise InvalidInputError(f"{what}: rotation determinant {det:.12g}, expected +1")
    return rotation


def _check_vec3(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise InvalidInputError(f"{what}: expected a 3-vector, got shape {v.shape}")
    return v


def so3_hat(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues map from an axis-angle 3-vector to a rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = so3_hat(w)
    if theta < 1e-12:
        # second order series, exact to machine precision at this scale
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues map; returns the axis-angle vector with angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        # R ~ I + hat(w), read w off the skew part
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        # fix the sign using the largest off-diagonal skew component
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(w, axis) < 0.0:
            axis = -axis
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def so3_right_jacobian(w: np.ndarray) -> np.ndarray:
    """Right Jacobian of the Rodrigues map, used by the analytic pose Jacobian."""
    theta = np.linalg.norm(w)
    K = so3_hat(w)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / t2 * K
        + (theta - np.sin(theta)) / (t2 * theta) * (K @ K)
    )


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: ``x -> R @ x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "RigidTransform"))
        object.__setattr__(self, "translation", _check_vec3(self.translation, "RigidTransform"))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_params(cls, params: np.ndarray) -> "RigidTransform":
        """Build from a 6-vector (axis-angle, translation)."""
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        if params.shape != (6,):
            raise InvalidInputError(f"pose parameters must have 6 entries, got {params.shape}")
        return cls(axis_angle_to_matrix(params[:3]), params[3:])

    def params(self) -> np.ndarray:
        return np.concatenate([matrix_to_axis_angle(self.rotation), self.translation])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class SimilarityTransform:
    """Uniform scale, rotation, translation: ``x -> s * R @ x + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise InvalidInputError(f"similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "SimilarityTransform"))
        object.__setattr__(
            self, "translation", _check_vec3(self.translation, "SimilarityTransform")
        )

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -Rt @ self.translation / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform applying ``other`` first, then ``self``."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )


def compose_alignment(similarity: SimilarityTransform, rigid: RigidTransform) -> SimilarityTransform:
    """Full model-to-world map: the similarity followed by the rigid correction."""
    return SimilarityTransform(
        similarity.scale,
        rigid.rotation @ similarity.rotation,
        rigid.rotation @ similarity.translation + rigid.translation,
    )


@dataclass(frozen=True)
class PerspectiveCamera:
    """Calibrated pinhole camera with a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    frame_id: str = field(default="")

    def __post_init__(self):
        for name in ("fx", "fy"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0.0:
                raise InvalidInputError(f"camera {name} must be positive, got {val}")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidInputError(
                f"camera image size must be positive, got {self.width}x{self.height}"
            )
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "PerspectiveCamera"))
        object.__setattr__(self, "translation", _check_vec3(self.translation, "PerspectiveCamera"))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation


def project(camera: PerspectiveCamera, point: np.ndarray,
            frame_id=None, keypoint_id=None) -> np.ndarray:
    """Project one world point to pixel coordinates.

    Raises:
        BehindCameraError: if the camera-frame depth is below ``DEPTH_EPS``.
    """
    p = camera.to_camera(_check_vec3(point, "project"))
    if p[2] < DEPTH_EPS:
        raise BehindCameraError(
            f"point at camera depth {p[2]:.3g} cannot be projected",
            frame_id=frame_id if frame_id is not None else camera.frame_id,
            keypoint_id=keypoint_id,
        )
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


def project_points(camera: PerspectiveCamera, points: np.ndarray):
    """Project many world points without raising.

    Returns:
        (uv, depth): an (N, 2) pixel array and an (N,) camera-depth array.
        Entries with depth below ``DEPTH_EPS`` hold NaN pixels; callers decide
        how to treat them.
    """
    p = camera.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = p[:, 2].copy()
    ok = depth >= DEPTH_EPS
    uv = np.full((p.shape[0], 2), np.nan)
    uv[ok, 0] = camera.fx * p[ok, 0] / depth[ok] + camera.cx
    uv[ok, 1] = camera.fy * p[ok, 1] / depth[ok] + camera.cy
    return uv, depth


def backproject(camera: PerspectiveCamera, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Invert the projection at a known camera-frame depth.

    Returns the camera-frame 3D point whose projection is ``pixel`` and whose
    depth equals ``depth``.
    """
    if depth < DEPTH_EPS:
        raise InvalidInputError(f"backprojection depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    return np.array(
        [(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth]
    )


def umeyama_fit(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform mapping source points onto target points.

    Classic closed-form alignment via the SVD of the cross-covariance, with the
    reflection case repaired so the returned rotation always has determinant +1.

    Args:
        source: (N, 3) points, N >= 3.
        target: (N, 3) points paired with source.

    Raises:
        DegenerateGeometryError: fewer than 3 pairs, or source points that are
            collinear/coincident so the rotation is not determined.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise InvalidInputError(
            f"point sets must match, got {src.shape} vs {dst.shape}"
        )
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"similarity fit needs at least 3 pairs, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    var_s = (cs * cs).sum() / n
    if var_s < 1e-30:
        raise DegenerateGeometryError("source points are coincident")

    cov = cd.T @ cs / n
    U, D, Vt = np.linalg.svd(cov)
    # rank < 2 leaves a rotation axis free
    if D[1] < 1e-12 * max(D[0], 1e-300):
        raise DegenerateGeometryError("source/target points are (near) collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    if s <= 0.0:
        raise DegenerateGeometryError("alignment collapsed to non-positive scale")
    t = mu_d - s * R @ mu_s
    return SimilarityTransform(s, R, t)


def camera_head_angles(camera: PerspectiveCamera,
                       head_frame: SimilarityTransform) -> tuple[float, float]:
    """Viewing direction of a camera expressed in the head frame, in degrees.

    ``head_frame`` maps canonical head coordinates to world coordinates. In
    canonical coordinates +z is the facial direction and +y points up, so a
    camera straight in front of the face sits at azimuth 0 and a camera
    straight above at elevation 90. Azimuth grows towards the head's +x side
    and is reported in [0, 360); elevation lies in [-90, 90].
    """
    c = head_frame.inverse().apply(camera.center())
    r = np.linalg.norm(c)
    if r < 1e-12:
        raise InvalidInputError("camera center coincides with the head origin")
    azimuth = np.degrees(np.arctan2(c[0], c[2])) % 360.0
    elevation = np.degrees(np.arcsin(np.clip(c[1] / r, -1.0, 1.0)))
    return float(azimuth), float(elevation)
