"""Planar homography estimation (normalized DLT) and pose extraction."""
from __future__ import annotations

import numpy as np

from .errors import BehindCamera, DegenerateConfiguration, InsufficientPoints, LengthMismatch
from .geometry import (CameraIntrinsics, PoseParams, apply_homography,
                       axis_angle_from_rotation, nearest_rotation)

# above this many correspondences the 9x9 normal matrix is accumulated instead
# of decomposing the full 2n x 9 design matrix
NORMAL_EQUATIONS_THRESHOLD = 10_000
_CHUNK = 50_000


def normalize_homography(H) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if abs(H[2, 2]) > 1e-12:
        return H / H[2, 2]
    return H / np.linalg.norm(H)


def similarity_normalization(pts) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]).mean()
    if d <= 0:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _design_rows(src, dst) -> np.ndarray:
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    rows_u = np.column_stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u])
    rows_v = np.column_stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v])
    return np.vstack([rows_u, rows_v])


def _dlt_nullspace(src, dst, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Right singular vector of the design matrix and its singular values."""
    if method == "svd":
        M = _design_rows(src, dst)
        # with 4 points M is 8x9: the null vector only shows up in the full basis
        _, s, Vt = np.linalg.svd(M, full_matrices=M.shape[0] < 9)
        return Vt[-1], np.pad(s, (0, 9 - s.size))
    N = np.zeros((9, 9))
    for i in range(0, len(src), _CHUNK):
        M = _design_rows(src[i:i + _CHUNK], dst[i:i + _CHUNK])
        N += M.T @ M
    w, V = np.linalg.eigh(N)
    return V[:, 0], np.sqrt(np.clip(w[::-1], 0.0, None))


def estimate_homography(pw, pd, method: str = "auto", normalized: bool = True) -> np.ndarray:
    """Homography mapping target points ``pw`` onto image points ``pd``.

    ``method`` is ``"svd"`` (full design matrix), ``"normal"`` (9x9 normal
    matrix) or ``"auto"``, which switches to the normal matrix above
    ``NORMAL_EQUATIONS_THRESHOLD`` points.
    """
    pw = np.asarray(pw, dtype=float).reshape(-1, 2)
    pd = np.asarray(pd, dtype=float).reshape(-1, 2)
    if len(pw) != len(pd):
        raise LengthMismatch(f"{len(pw)} target points vs {len(pd)} image points")
    if len(pw) < 4:
        raise InsufficientPoints(f"need at least 4 correspondences, got {len(pw)}")
    if method == "auto":
        method = "normal" if len(pw) > NORMAL_EQUATIONS_THRESHOLD else "svd"
    if method not in ("svd", "normal"):
        raise ValueError(f"unknown method {method!r}")

    if normalized:
        Tw, Td = similarity_normalization(pw), similarity_normalization(pd)
    else:
        Tw = Td = np.eye(3)
    src = pw @ Tw[:2, :2].T + Tw[:2, 2]
    dst = pd @ Td[:2, :2].T + Td[:2, 2]
    h, s = _dlt_nullspace(src, dst, method)
    # a second (near-)null direction means collinear or repeated points
    if s[-2] <= 1e-7 * s[0]:
        raise DegenerateConfiguration("rank-deficient design matrix (collinear points?)")
    Hn = h.reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Tw)
    return normalize_homography(H)


def reproject(H, pw) -> np.ndarray:
    return apply_homography(H, pw)


def extrinsics_from_homography(H, A: CameraIntrinsics) -> PoseParams:
    """Pose of the target plane from ``H ~ A [r1 r2 t]``."""
    Ainv = np.linalg.inv(A.matrix)
    H = np.asarray(H, dtype=float)
    b1, b2, b3 = (Ainv @ H[:, k] for k in range(3))
    norm1 = np.linalg.norm(b1)
    if norm1 == 0:
        raise DegenerateConfiguration("first homography column is null")
    lam = 1.0 / norm1
    if b3[2] == 0:
        raise BehindCamera("translation has zero depth for either sign")
    if b3[2] < 0:
        lam = -lam
    r1, r2, t = lam * b1, lam * b2, lam * b3
    R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return PoseParams(axis_angle_from_rotation(R), t)


def homography_from_calibration(A: CameraIntrinsics, E: PoseParams) -> np.ndarray:
    return normalize_homography(A.matrix @ E.matrix)
