"""Pinhole projection, 6th-order radial distortion and axis-angle rotations.

Conventions: image points are in continuous pixel coordinates with the origin
at the sensor corner; target points lie on the plane Z = 0 and are in mm.
Point lists are ``(n, 2)`` float arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, NonPositiveDepth

_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    u0: float
    v0: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.skew != 0.0:
            raise ValueError("non-zero skew is not supported")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.u0],
                         [0.0, self.fy, self.v0],
                         [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.u0, self.v0])


@dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def from_degrees(cls, angles_deg, t) -> "PoseParams":
        return cls(np.radians(np.asarray(angles_deg, dtype=float)), t)

    @property
    def angles_deg(self) -> np.ndarray:
        return np.degrees(self.theta)

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_axis_angle(self.theta)

    @property
    def matrix(self) -> np.ndarray:
        """Planar extrinsic matrix ``[r1 r2 t]``."""
        R = self.rotation
        return np.column_stack([R[:, 0], R[:, 1], self.t])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.t])

    def __eq__(self, other):
        if not isinstance(other, PoseParams):
            return NotImplemented
        return np.array_equal(self.theta, other.theta) and np.array_equal(self.t, other.t)


@dataclass(frozen=True)
class RadialDistortion:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3])

    def factor(self, r2):
        """Relative radial displacement ``k1 r^2 + k2 r^4 + k3 r^6``."""
        return r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))


@dataclass(frozen=True)
class SensorSpec:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"invalid sensor size {self.width}x{self.height}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return ((pts[..., 0] >= 0) & (pts[..., 0] <= self.width)
                & (pts[..., 1] >= 0) & (pts[..., 1] <= self.height))


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired target points ``pw`` (mm) and detected image points ``pd`` (px).

    ``ideal`` optionally carries the undistorted projections of synthetic data.
    """
    pw: np.ndarray
    pd: np.ndarray
    ideal: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        pw = np.asarray(self.pw, dtype=float).reshape(-1, 2)
        pd = np.asarray(self.pd, dtype=float).reshape(-1, 2)
        if pw.shape != pd.shape:
            raise LengthMismatch(f"{len(pw)} target points vs {len(pd)} image points")
        object.__setattr__(self, "pw", pw)
        object.__setattr__(self, "pd", pd)
        if self.ideal is not None:
            ideal = np.asarray(self.ideal, dtype=float).reshape(-1, 2)
            if ideal.shape != pd.shape:
                raise LengthMismatch("ideal points do not match image points")
            object.__setattr__(self, "ideal", ideal)

    def __len__(self) -> int:
        return len(self.pd)

    def subset(self, mask) -> "CorrespondenceSet":
        ideal = None if self.ideal is None else self.ideal[mask]
        return CorrespondenceSet(self.pw[mask], self.pd[mask], ideal)


def skew_matrix(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = np.linalg.norm(theta)
    K = skew_matrix(theta)
    if angle < _SMALL_ANGLE:
        # second-order Taylor expansion of the Rodrigues formula
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + (np.sin(angle) / angle) * K
            + ((1.0 - np.cos(angle)) / angle**2) * K @ K)


def axis_angle_from_rotation(R) -> np.ndarray:
    """Inverse of :func:`rotation_from_axis_angle`, returning ``|theta| <= pi``."""
    R = np.asarray(R, dtype=float)
    cos_a = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_a)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-6:
        return 0.5 * w
    if np.pi - angle > 1e-4:
        return angle / (2.0 * np.sin(angle)) * w
    # near pi: axis from the symmetric part, sign from the skew part
    B = (R + np.eye(3)) / 2.0
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(B[i, i])
    axis /= np.linalg.norm(axis)
    if np.dot(axis, w) < 0:
        axis = -axis
    return angle * axis


def rotation_jacobian(theta) -> list[np.ndarray]:
    """Derivatives ``dR/dtheta_i`` for i = 0, 1, 2."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle2 = float(theta @ theta)
    R = rotation_from_axis_angle(theta)
    E = np.eye(3)
    if angle2 < _SMALL_ANGLE**2:
        return [skew_matrix(E[i]) for i in range(3)]
    K = skew_matrix(theta)
    IR = np.eye(3) - R
    return [(theta[i] * K + skew_matrix(np.cross(theta, IR @ E[i]))) @ R / angle2
            for i in range(3)]


def nearest_rotation(M) -> np.ndarray:
    """Closest rotation to ``M`` in the Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def to_homogeneous(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return np.column_stack([pts, np.ones(len(pts))])


def apply_homography(H, pts, min_depth: float = 1e-12) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    flat = pts.reshape(-1, 2)
    q = to_homogeneous(flat) @ np.asarray(H, dtype=float).T
    w = q[:, 2]
    if np.any(np.abs(w) < min_depth):
        raise NonPositiveDepth("homogeneous coordinate vanishes")
    return (q[:, :2] / w[:, None]).reshape(pts.shape)


def camera_points(pw, pose: PoseParams) -> np.ndarray:
    """Target points expressed in the camera frame, shape (n, 3)."""
    pw = np.asarray(pw, dtype=float).reshape(-1, 2)
    R = pose.rotation
    return pw[:, :1] * R[:, 0] + pw[:, 1:2] * R[:, 1] + pose.t


def project_ideal(pw, A: CameraIntrinsics, E: PoseParams) -> np.ndarray:
    """Undistorted pinhole projection of target points lying on Z = 0."""
    pw = np.asarray(pw, dtype=float)
    Xc = camera_points(pw, E)
    z = Xc[:, 2]
    if np.any(z <= 0):
        raise NonPositiveDepth(f"{int(np.sum(z <= 0))} point(s) behind the camera")
    out = np.column_stack([A.fx * Xc[:, 0] / z + A.u0, A.fy * Xc[:, 1] / z + A.v0])
    return out.reshape(pw.shape)


def normalize(p, A: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.stack([(p[..., 0] - A.u0) / A.fx, (p[..., 1] - A.v0) / A.fy], axis=-1)


def apply_distortion(p, A: CameraIntrinsics, K: RadialDistortion) -> np.ndarray:
    """Move ideal points radially about the principal point by the polynomial factor."""
    p = np.asarray(p, dtype=float)
    n = normalize(p, A)
    r2 = n[..., 0] ** 2 + n[..., 1] ** 2
    # displacement form, so zero coefficients give back p bit for bit
    return p + (p - A.center) * K.factor(r2)[..., None]


def project_distorted(pw, A: CameraIntrinsics, E: PoseParams, K: RadialDistortion) -> np.ndarray:
    return apply_distortion(project_ideal(pw, A, E), A, K)


def total_disparity(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if a.shape != b.shape:
        raise LengthMismatch(f"{len(a)} vs {len(b)} points")
    return np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1])


def radii(pts, center) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    return np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])


def monotone_radius(K: RadialDistortion) -> float:
    """Largest normalized radius up to which the distortion map is increasing."""
    # d/dr [r (1 + D(r^2))] = 1 + 3 k1 s + 5 k2 s^2 + 7 k3 s^3 with s = r^2
    roots = np.roots([7.0 * K.k3, 5.0 * K.k2, 3.0 * K.k1, 1.0])
    s = [z.real for z in np.atleast_1d(roots) if abs(z.imag) < 1e-12 and z.real > 0]
    return float(np.sqrt(min(s))) if s else np.inf


def remove_distortion(pd, A: CameraIntrinsics, K: RadialDistortion, iterations: int = 50) -> np.ndarray:
    """Inverse of :func:`apply_distortion` by Newton iteration on the normalized radius."""
    pd = np.asarray(pd, dtype=float)
    n = normalize(pd, A)
    rd = np.hypot(n[..., 0], n[..., 1])
    r = rd.copy()
    for _ in range(iterations):
        s = r * r
        g = r * (1.0 + K.factor(s)) - rd
        dg = 1.0 + s * (3.0 * K.k1 + s * (5.0 * K.k2 + s * 7.0 * K.k3))
        step = g / dg
        r = r - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(r, 1e-300)):
            break
    ratio = np.divide(r, rd, out=np.ones_like(rd), where=rd > 0)
    return np.stack([A.fx * n[..., 0] * ratio + A.u0,
                     A.fy * n[..., 1] * ratio + A.v0], axis=-1)
