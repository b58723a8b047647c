"""Single-image calibration from one dense set of correspondences.

Stages:

1. centre of distortion from the collinearity of distorted and reprojected
   points (:func:`step1_estimate_cod`);
2. focal length and pose from the homography of the inscribed-circle subset
   (:func:`step2_init`);
3. either a bounded least-squares fit of the 6th-order polynomial model
   (:func:`step3a_model_based`) or a model-free refinement that makes the
   radial curve monotone and tangent at the origin (:func:`step3b_model_free`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import isotonic_regression

from .errors import (CalibrationError, DistortionTooSmall, IllPosedPose, InsufficientPoints,
                     MonotonicityFailed, NonMonotoneCurve, OptimizationDiverged)
from .geometry import (CameraIntrinsics, CorrespondenceSet, PoseParams, RadialDistortion,
                       SensorSpec, axis_angle_from_rotation, project_distorted, project_ideal, radii,
                       rotation_from_axis_angle,
                       rotation_jacobian, total_disparity)
from .homography import (estimate_homography, extrinsics_from_homography, normalize_homography,
                         reproject)
from .optimize import (BoundedProblem, EpsilonConstraint, MedianConstraint, OptimResult, minimize,
                       minimize_scalar_constrained)

logger = logging.getLogger(__name__)

STAGES = ("Step1", "Step2", "Step3A", "Step3B")
MIN_POINTS = 1000
DENSE_POINTS = 10_000
MIN_DISPARITY = 0.05
ILL_POSED_PRODUCT = 1e-12

# Step 1 search box
SCALE_BOUNDS = (0.5, 2.0)
SENSOR_EXPANSION = 0.25
_SURROGATE_POINTS = 15_000

# Step 3A half-widths
FOCAL_REL_BOUND = 0.05
CENTER_BOUND_PX = 30.0
ANGLE_BOUND_RAD = np.radians(5.0)
TRANSLATION_REL_BOUND = 0.10
K_BOUNDS = (50.0, 500.0, 5000.0)
FR_BOUND = 0.05
# RMS scatter (px) below which Phase 1 of the model-free step is skipped
_SINGLE_VALUED_RMS = 1e-10


@dataclass(frozen=True)
class Step1Params:
    Sx: float
    Sy: float
    u0: float
    v0: float
    uc: float
    vc: float
    cc: float = float("nan")
    low_density: bool = False
    converged: bool = True

    @property
    def AR(self) -> float:
        return self.Sy / self.Sx

    @property
    def cod(self) -> np.ndarray:
        return np.array([self.u0, self.v0])

    def as_vector(self) -> np.ndarray:
        return np.array([self.Sx, self.Sy, self.u0, self.v0, self.uc, self.vc])


@dataclass(frozen=True)
class RadialCurve:
    """Radial map r_d -> r_u about ``cod``, with ``r_d`` strictly increasing."""
    r_d: np.ndarray
    r_u: np.ndarray
    cod: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        r_d = np.asarray(self.r_d, dtype=float).ravel()
        r_u = np.asarray(self.r_u, dtype=float).ravel()
        if r_d.shape != r_u.shape:
            raise ValueError("r_d and r_u differ in length")
        if r_d.size == 0:
            raise ValueError("empty curve")
        if np.any(np.diff(r_d) <= 0):
            raise ValueError("r_d must be strictly increasing; use RadialCurve.from_samples")
        object.__setattr__(self, "r_d", r_d)
        object.__setattr__(self, "r_u", r_u)
        object.__setattr__(self, "cod", (float(self.cod[0]), float(self.cod[1])))

    @classmethod
    def from_samples(cls, r_d, r_u, cod=(0.0, 0.0)) -> "RadialCurve":
        """Sort by ``r_d`` and average ``r_u`` over repeated ``r_d`` values."""
        r_d = np.asarray(r_d, dtype=float).ravel()
        r_u = np.asarray(r_u, dtype=float).ravel()
        order = np.argsort(r_d, kind="stable")
        r_d, r_u = r_d[order], r_u[order]
        uniq, start, counts = np.unique(r_d, return_index=True, return_counts=True)
        if len(uniq) < len(r_d):
            r_u = np.add.reduceat(r_u, start) / counts
        return cls(uniq, r_u, cod)

    @classmethod
    def from_points(cls, pd, pu, cod) -> "RadialCurve":
        return cls.from_samples(radii(pd, cod), radii(pu, cod), cod)

    def __len__(self) -> int:
        return self.r_d.size

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.r_u) >= 0))

    def scaled(self, s: float) -> "RadialCurve":
        return RadialCurve(self.r_d, s * self.r_u, self.cod)


@dataclass(frozen=True)
class ModelFreeConfig:
    epsilon: float = 0.0
    n_prime_p: int = 200
    variant: Literal["epsilon", "median"] = "epsilon"
    # Phase-1 tolerance: fraction of clearly decreasing successive pairs allowed
    max_decreasing_fraction: float = 0.01
    # interior knots of the trend spline used in Phase 1
    n_knots: int = 40

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_prime_p < 10:
            raise ValueError(f"n_prime_p must be >= 10, got {self.n_prime_p}")
        if self.variant not in ("epsilon", "median"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class CalibrationResult:
    intrinsics: CameraIntrinsics
    pose: PoseParams
    distortion: RadialDistortion | RadialCurve | None
    rpe_mean: float
    rpe_std: float
    stage: str
    warnings: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.rpe_mean >= 0:
            raise ValueError("rpe_mean must be non-negative")


def focal_from_homography(H, cod) -> float:
    """Closed-form focal length for square pixels given the principal point."""
    h = normalize_homography(H)
    u0, v0 = cod
    den = h[2, 0] * h[2, 1]
    if abs(den) < ILL_POSED_PRODUCT:
        raise IllPosedPose(f"|h31*h32| = {abs(den):.3g}: target is too close to fronto-parallel")
    num = ((h[0, 0] - u0 * h[2, 0]) * (h[0, 1] - u0 * h[2, 1])
           + (h[1, 0] - v0 * h[2, 0]) * (h[1, 1] - v0 * h[2, 1]))
    return float(np.sqrt(abs(num / den)))


# ---------------------------------------------------------------- Step 1

def collinearity_terms(x, pd, pp) -> tuple[np.ndarray, np.ndarray]:
    """Cross products and segment lengths of the centred point pairs."""
    Sx, Sy, u0, v0, uc, vc = x
    xd = pd[:, 0] - u0
    yd = pd[:, 1] - v0
    xu = Sx * (pp[:, 0] - uc)
    yu = Sy * (pp[:, 1] - vc)
    return xu * yd - yu * xd, np.hypot(yd - yu, xd - xu)


def collinearity_cost(x, pd, pp) -> float:
    """Mean distance of the lines through each (p_d0, p_u0) pair from the origin."""
    cross, den = collinearity_terms(x, pd, pp)
    return float(np.mean(np.abs(cross) / np.maximum(den, 1e-12)))


def disparity_minimum(pd, d_tot, sensor: SensorSpec, fraction: float = 0.01) -> np.ndarray:
    """Centroid of the lowest-disparity points inside the central third of the sensor."""
    lo = np.array([sensor.width, sensor.height]) / 3.0
    central = np.all((pd >= lo) & (pd <= 2.0 * lo), axis=1)
    if not np.any(central):
        return sensor.center
    pts, d = pd[central], d_tot[central]
    k = max(1, int(np.ceil(fraction * len(d))))
    idx = np.argsort(d, kind="stable")[:k]
    return pts[idx].mean(axis=0)


def step1_estimate_cod(data: CorrespondenceSet, sensor: SensorSpec,
                       init: Literal["center", "disparity"] = "center") -> Step1Params:
    """Centre of distortion by minimizing the collinearity cost.

    The homography of all points is estimated and the reprojected points are
    centred and scaled anisotropically (Sx, Sy about (uc, vc)); the centre
    (u0, v0) that makes every distorted/undistorted pair collinear with it is
    sought. A least-squares pass on the signed, length-normalized cross
    products over a subsample gives a fast start; Nelder-Mead on the exact
    cost over all points finishes.
    """
    n = len(data)
    if n < MIN_POINTS:
        raise InsufficientPoints(f"{n} points; the centre search needs at least {MIN_POINTS}", "Step1")
    low_density = n < DENSE_POINTS
    if low_density:
        logger.warning("only %d points; dense coverage (>= %d) is recommended", n, DENSE_POINTS)

    pd = data.pd
    H = estimate_homography(data.pw, pd)
    pp = reproject(H, data.pw)
    d_tot = total_disparity(pp, pd)
    if np.median(d_tot) < MIN_DISPARITY:
        raise DistortionTooSmall(
            f"median total disparity {np.median(d_tot):.3g} px < {MIN_DISPARITY} px", "Step1")

    if init == "center":
        c0 = sensor.center
    elif init == "disparity":
        c0 = disparity_minimum(pd, d_tot, sensor)
    else:
        raise ValueError(f"unknown initializer {init!r}")
    pad = SENSOR_EXPANSION * np.array([sensor.width, sensor.height])
    cmin, cmax = -pad, np.array([sensor.width, sensor.height]) + pad
    lower = np.array([SCALE_BOUNDS[0], SCALE_BOUNDS[0], *cmin, *cmin])
    upper = np.array([SCALE_BOUNDS[1], SCALE_BOUNDS[1], *cmax, *cmax])
    x0 = np.clip(np.array([1.0, 1.0, *c0, *c0]), lower, upper)

    stride = max(1, n // _SURROGATE_POINTS)
    pd_s, pp_s = pd[::stride], pp[::stride]
    root_n = np.sqrt(len(pd_s))

    def surrogate(x):
        cross, den = collinearity_terms(x, pd_s, pp_s)
        return cross / np.maximum(den, 1e-12) / root_n

    fast = minimize(BoundedProblem(x0, lower, upper, residuals=surrogate), tol=1e-10, max_iter=200)

    # the exact cost falls off towards small scales, so the polish starts there
    x1 = fast.x.copy()
    x1[:2] = np.clip(0.5 * x1[:2], lower[:2], upper[:2])
    pd_c, pp_c = np.ascontiguousarray(pd), np.ascontiguousarray(pp)
    polish = minimize(BoundedProblem(x1, lower, upper,
                                     objective=lambda x: collinearity_cost(x, pd_c, pp_c)),
                      tol=1e-10, max_iter=3000, initial_step=0.002, xtol=1e-7)
    Sx, Sy, u0, v0, uc, vc = polish.x
    return Step1Params(float(Sx), float(Sy), float(u0), float(v0), float(uc), float(vc),
                       cc=float(polish.f), low_density=low_density,
                       converged=bool(fast.converged and polish.converged))


def step1_result(data: CorrespondenceSet, step1: Step1Params) -> CalibrationResult:
    """Focal length and pose implied by the all-point homography at the Step-1 centre."""
    H = estimate_homography(data.pw, data.pd)
    return _result_from_homography(data, H, step1.cod, "Step1",
                                   extras={"step1": step1})


def _result_from_homography(data, H, cod, stage, extras) -> CalibrationResult:
    f = focal_from_homography(H, cod)
    A = CameraIntrinsics(f, f, float(cod[0]), float(cod[1]))
    pose = extrinsics_from_homography(H, A)
    pu = reproject(H, data.pw)
    d = total_disparity(pu, data.pd)
    curve = RadialCurve.from_points(data.pd, pu, cod)
    return CalibrationResult(A, pose, curve, float(d.mean()), float(d.std()), stage,
                             extras={**extras, "homography": H})


# ---------------------------------------------------------------- Step 2

def inscribed_subset(data: CorrespondenceSet, cod, sensor: SensorSpec) -> np.ndarray:
    """Mask of points inside the largest circle about ``cod`` contained in the sensor."""
    u0, v0 = cod
    R = min(u0, v0, sensor.width - u0, sensor.height - v0)
    if R <= 0:
        raise CalibrationError(f"centre ({u0:.2f}, {v0:.2f}) lies outside the sensor", "Step2")
    return radii(data.pd, cod) <= R


def step2_init(data: CorrespondenceSet, cod, sensor: SensorSpec) -> tuple[CalibrationResult, RadialCurve]:
    """Focal length and pose from the homography of the inscribed-circle subset.

    Returns the Step-2 result and the radial curve of all points reprojected
    through the subset homography.
    """
    cod = (float(cod[0]), float(cod[1]))
    mask = inscribed_subset(data, cod, sensor)
    if mask.sum() < 4:
        raise InsufficientPoints(f"{int(mask.sum())} points inside the inscribed circle", "Step2")
    H = estimate_homography(data.pw[mask], data.pd[mask])
    res = _result_from_homography(data, H, cod, "Step2", extras={"subset_size": int(mask.sum())})
    return res, res.distortion


# ---------------------------------------------------------------- Step 3A

def _model_residuals(x, pw, pd) -> np.ndarray:
    fx, fy, u0, v0 = x[:4]
    R = rotation_from_axis_angle(x[4:7])
    t, k1, k2, k3 = x[7:10], x[10], x[11], x[12]
    Xc = pw[:, :1] * R[:, 0] + pw[:, 1:2] * R[:, 1] + t
    xn, yn = Xc[:, 0] / Xc[:, 2], Xc[:, 1] / Xc[:, 2]
    r2 = xn * xn + yn * yn
    s = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    return np.concatenate([pd[:, 0] - (fx * xn * s + u0), pd[:, 1] - (fy * yn * s + v0)])


def _model_jacobian(x, pw) -> np.ndarray:
    """Jacobian of :func:`_model_residuals` (residual = observed - predicted)."""
    fx, fy = x[0], x[1]
    theta = x[4:7]
    R = rotation_from_axis_angle(theta)
    dR = rotation_jacobian(theta)
    t, k1, k2, k3 = x[7:10], x[10], x[11], x[12]
    X, Y = pw[:, 0], pw[:, 1]
    Xc = X[:, None] * R[:, 0] + Y[:, None] * R[:, 1] + t
    z = Xc[:, 2]
    xn, yn = Xc[:, 0] / z, Xc[:, 1] / z
    r2 = xn * xn + yn * yn
    s = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    ds = k1 + r2 * (2.0 * k2 + r2 * 3.0 * k3)

    n = len(pw)
    Jx = np.zeros((n, 13))
    Jy = np.zeros((n, 13))
    Jx[:, 0] = xn * s
    Jy[:, 1] = yn * s
    Jx[:, 2] = 1.0
    Jy[:, 3] = 1.0
    # pose: derivatives of the camera-frame point
    dXc = [X[:, None] * D[:, 0] + Y[:, None] * D[:, 1] for D in dR] + [np.tile(e, (n, 1)) for e in np.eye(3)]
    for j, dP in enumerate(dXc):
        dxn = (dP[:, 0] - xn * dP[:, 2]) / z
        dyn = (dP[:, 1] - yn * dP[:, 2]) / z
        dsj = ds * 2.0 * (xn * dxn + yn * dyn)
        Jx[:, 4 + j] = fx * (dxn * s + xn * dsj)
        Jy[:, 4 + j] = fy * (dyn * s + yn * dsj)
    p = r2.copy()
    for j in range(3):
        Jx[:, 10 + j] = fx * xn * p
        Jy[:, 10 + j] = fy * yn * p
        p = p * r2
    return -np.vstack([Jx, Jy])


def model_parameter_vector(A: CameraIntrinsics, pose: PoseParams, K: RadialDistortion) -> np.ndarray:
    return np.concatenate([[A.fx, A.fy, A.u0, A.v0], pose.theta, pose.t, K.coeffs])


def model_bounds(A: CameraIntrinsics, pose: PoseParams) -> tuple[np.ndarray, np.ndarray]:
    tn = float(np.linalg.norm(pose.t))
    half = np.concatenate([[FOCAL_REL_BOUND * A.fx, FOCAL_REL_BOUND * A.fy, CENTER_BOUND_PX, CENTER_BOUND_PX],
                           np.full(3, ANGLE_BOUND_RAD), np.full(3, TRANSLATION_REL_BOUND * tn),
                           np.zeros(3)])
    centre = np.concatenate([[A.fx, A.fy, A.u0, A.v0], pose.theta, pose.t, np.zeros(3)])
    lower, upper = centre - half, centre + half
    lower[10:], upper[10:] = -np.array(K_BOUNDS), np.array(K_BOUNDS)
    return lower, upper


def _reprojection_stats(data, A, pose, K) -> tuple[float, float, np.ndarray]:
    e = total_disparity(project_distorted(data.pw, A, pose, K), data.pd)
    return float(e.mean()), float(e.std()), e


def step3a_model_based(data: CorrespondenceSet, init: CalibrationResult,
                       tol: float = 1e-12, max_iter: int = 200) -> CalibrationResult:
    """Bounded least-squares fit of intrinsics, pose and k1..k3 to all points.

    The sum of squared reprojection errors is minimized by projected
    Levenberg-Marquardt with the analytic Jacobian; distortion starts at zero.
    """
    A0, pose0 = init.intrinsics, init.pose
    x0 = model_parameter_vector(A0, pose0, RadialDistortion())
    lower, upper = model_bounds(A0, pose0)
    pw, pd = data.pw, data.pd
    problem = BoundedProblem(x0, lower, upper,
                             residuals=lambda x: _model_residuals(x, pw, pd),
                             jacobian=lambda x: _model_jacobian(x, pw))
    res = minimize(problem, tol=tol, max_iter=max_iter, method="lm")
    if not np.isfinite(res.f) or res.f > res.trace[0]:
        raise OptimizationDiverged(f"objective went from {res.trace[0]:.6g} to {res.f:.6g}", "Step3A")

    x = res.x
    A = CameraIntrinsics(x[0], x[1], x[2], x[3])
    pose = PoseParams(x[4:7], x[7:10])
    K = RadialDistortion(*x[10:13])
    mean, std, _ = _reprojection_stats(data, A, pose, K)
    warnings = []
    span = upper - lower
    active = (np.abs(x - lower) <= 1e-9 * span) | (np.abs(upper - x) <= 1e-9 * span)
    if np.any(active):
        names = np.array(PARAMETER_NAMES)[active]
        warnings.append("BoundsActive: " + ",".join(names))
    if not res.converged:
        warnings.append(f"NotConverged: {res.termination}")
    return CalibrationResult(A, pose, K, mean, std, "Step3A", warnings,
                             extras={"iterations": res.iterations, "termination": res.termination,
                                     "sum_squares": res.f})


PARAMETER_NAMES = ("fx", "fy", "u0", "v0", "theta_x", "theta_y", "theta_z",
                   "tx", "ty", "tz", "k1", "k2", "k3")


# ---------------------------------------------------------------- Step 3B

class _MonotonicityObjective:
    """Sum of squared successive differences of r_u after ordering by r_d.

    Parameters are (u0, v0, FR, theta, t) with fx held fixed. The sort is
    stable, so points with equal r_d keep their input order.
    """

    def __init__(self, pw, pd, fx):
        self.X = np.ascontiguousarray(pw[:, 0])
        self.Y = np.ascontiguousarray(pw[:, 1])
        self.xd = np.ascontiguousarray(pd[:, 0])
        self.yd = np.ascontiguousarray(pd[:, 1])
        self.fx = float(fx)

    def radii(self, x):
        u0, v0, fr = x[:3]
        R = rotation_from_axis_angle(x[3:6])
        t = x[6:9]
        zc = self.X * R[2, 0] + self.Y * R[2, 1] + t[2]
        xu = self.fx * (self.X * R[0, 0] + self.Y * R[0, 1] + t[0]) / zc
        yu = fr * self.fx * (self.X * R[1, 0] + self.Y * R[1, 1] + t[1]) / zc
        r_u = np.hypot(xu, yu)
        r_d = np.hypot(self.xd - u0, self.yd - v0)
        return r_d, r_u

    def __call__(self, x) -> float:
        r_d, r_u = self.radii(x)
        return float(np.sum(np.diff(r_u[np.argsort(r_d, kind="stable")]) ** 2))


def decreasing_fraction(r_u_sorted) -> tuple[float, float]:
    """Fraction of successive pairs dropping by more than the local noise level.

    The noise level is a robust scale of the successive differences.
    """
    d = np.diff(r_u_sorted)
    if d.size == 0:
        return 0.0, 0.0
    mad = 1.4826 * np.median(np.abs(d - np.median(d)))
    tol = 3.5 * mad + 1e-9 * max(float(np.max(np.abs(r_u_sorted))), 1.0)
    return float(np.mean(d < -tol)), float(tol)


class _ScatterSurrogate:
    """Smooth stand-in for the monotonicity objective.

    For a dense curve the sum of squared successive differences splits into
    twice the scatter of r_u about its local trend in r_d plus a term set by
    the gaps between neighbouring r_d. Only the first carries information about
    the geometry, so the residuals here are the deviations of r_u from a
    least-squares cubic spline in r_d (knots fixed at construction), divided by
    the mean ratio r_u / r_d so that shrinking the image does not pay off.

    Parameters are (u0, v0, FR, wx, wy, tx, ty, tz): the rotation is
    ``exp([wx, wy, 0]) R0``. A turn about the optical axis leaves every radius
    unchanged, so it is excluded and the roll of ``R0`` is kept.
    """

    def __init__(self, pw, pd, fx, R0, n_knots: int = 40):
        self.X, self.Y = pw[:, 0], pw[:, 1]
        self.xd, self.yd = pd[:, 0], pd[:, 1]
        self.fx = float(fx)
        self.R0 = np.asarray(R0, dtype=float)
        self.n_knots = n_knots
        self.knots = None
        self.root_n = np.sqrt(len(pw))

    def rotation(self, x) -> np.ndarray:
        return rotation_from_axis_angle([x[3], x[4], 0.0]) @ self.R0

    def _parts(self, x):
        u0, v0, fr = x[:3]
        R = self.rotation(x)
        Xc = self.X[:, None] * R[:, 0] + self.Y[:, None] * R[:, 1] + x[5:8]
        z = Xc[:, 2]
        xu, yu = self.fx * Xc[:, 0] / z, fr * self.fx * Xc[:, 1] / z
        r_u = np.hypot(xu, yu)
        r_d = np.hypot(self.xd - u0, self.yd - v0)
        if self.knots is None:
            top = 1.05 * r_d.max()
            inner = np.linspace(0.0, top, self.n_knots + 2)[1:-1]
            self.knots = np.concatenate([np.zeros(4), inner, np.full(4, top)])
        B = BSpline.design_matrix(np.minimum(r_d, self.knots[-1]), self.knots, 3).tocsc()
        # truncated eigenbasis of B^T B: combinations with hardly any data behind
        # them are dropped instead of regularized, so curves in the spline space fit exactly
        G = (B.T @ B).toarray()
        dscale = 1.0 / np.sqrt(np.maximum(np.diag(G), 1e-300))
        lam, V = np.linalg.eigh(G * np.outer(dscale, dscale))
        keep = lam > 1e-12 * lam[-1]
        W = dscale[:, None] * V[:, keep] / np.sqrt(lam[keep])
        U = np.asarray(B @ W)  # orthonormal basis of the fitted subspace
        coef = W @ (U.T @ r_u)
        return R, Xc, xu, yu, r_u, r_d, U, coef

    def residuals(self, x) -> np.ndarray:
        *_, r_u, r_d, U, _ = self._parts(x)
        kappa = r_u.mean() / r_d.mean()
        return (r_u - U @ (U.T @ r_u)) / (self.root_n * kappa)

    def jacobian(self, x) -> np.ndarray:
        """Variable-projection Jacobian with the spline coefficients held fixed."""
        u0, v0, fr = x[:3]
        R, Xc, xu, yu, r_u, r_d, U, coef = self._parts(x)
        n = len(r_u)
        z = Xc[:, 2]
        ux, uy = xu / r_u, yu / r_u
        d_ru = np.zeros((n, 8))
        d_rd = np.zeros((n, 8))
        d_ru[:, 2] = uy * yu / fr
        P = Xc - x[5:8]
        moves = [np.cross([1.0, 0.0, 0.0], P), np.cross([0.0, 1.0, 0.0], P)]
        moves += [np.broadcast_to(e, (n, 3)) for e in np.eye(3)]
        for j, dP in enumerate(moves):
            dxu = self.fx * (dP[:, 0] - Xc[:, 0] / z * dP[:, 2]) / z
            dyu = fr * self.fx * (dP[:, 1] - Xc[:, 1] / z * dP[:, 2]) / z
            d_ru[:, 3 + j] = ux * dxu + uy * dyu
        d_rd[:, 0] = -(self.xd - u0) / r_d
        d_rd[:, 1] = -(self.yd - v0) / r_d
        slope = BSpline(self.knots, coef, 3).derivative()(np.minimum(r_d, self.knots[-1]))
        J = d_ru - slope[:, None] * d_rd
        J -= U @ (U.T @ J)
        e = r_u - U @ (U.T @ r_u)
        mu, md = r_u.mean(), r_d.mean()
        kappa = mu / md
        d_kappa = (d_ru.mean(axis=0) * md - mu * d_rd.mean(axis=0)) / md**2
        return (J / kappa - np.outer(e, d_kappa) / kappa**2) / self.root_n


def step3b_model_free(data: CorrespondenceSet, init: CalibrationResult, curve: RadialCurve | None = None,
                      cfg: ModelFreeConfig = ModelFreeConfig(), tol: float = 1e-12,
                      max_iter: int = 100) -> CalibrationResult:
    """Model-free refinement: monotone radial curve, then the origin-tangent scale.

    Phase 1 makes r_u a single-valued function of r_d over (u0, v0, fy/fx, pose)
    with fx fixed (see :class:`_ScatterSurrogate`); the monotonicity objective
    is reported before and after. Phase 2 picks the scale S* of the undistorted
    radii that fits the distorted radii under the slack or median constraint
    and sets fx = S* fx, fy = S* FR fx. Scaling about the principal point
    leaves the pose unchanged. The returned curve is the isotonic fit of the
    scaled samples. ``curve`` (the Step-2 curve) is accepted for symmetry with
    the other stages and is not needed.
    """
    A0, pose0 = init.intrinsics, init.pose
    fx = A0.fx
    fr0 = A0.fy / A0.fx
    tn = float(np.linalg.norm(pose0.t))
    x0 = np.concatenate([[A0.u0, A0.v0, fr0, 0.0, 0.0], pose0.t])
    half = np.concatenate([[CENTER_BOUND_PX, CENTER_BOUND_PX, FR_BOUND, ANGLE_BOUND_RAD, ANGLE_BOUND_RAD],
                           np.full(3, TRANSLATION_REL_BOUND * tn)])
    sur = _ScatterSurrogate(data.pw, data.pd, fx, pose0.rotation, cfg.n_knots)
    r0 = sur.residuals(x0)
    f0 = float(r0 @ r0)
    if np.sqrt(f0) < _SINGLE_VALUED_RMS:
        # already single-valued to rounding; any pose scaling would also fit, so stay put
        res = OptimResult(x0, f0, 0, 1, True, "already_single_valued", [f0])
    else:
        res = minimize(BoundedProblem(x0, x0 - half, x0 + half, residuals=sur.residuals,
                                      jacobian=sur.jacobian),
                       tol=tol, max_iter=max_iter, method="lm")
    x = res.x
    u0, v0, fr = x[:3]
    pose = PoseParams(axis_angle_from_rotation(sur.rotation(x)), x[5:8])

    M = _MonotonicityObjective(data.pw, data.pd, fx)
    xm = np.concatenate([[u0, v0, fr], pose.theta, pose.t])
    m0 = M(np.concatenate([[A0.u0, A0.v0, fr0], pose0.theta, pose0.t]))
    m1 = M(xm)
    r_d, r_u = M.radii(xm)
    order = np.argsort(r_d, kind="stable")
    r_d, r_u = r_d[order], r_u[order]
    frac, noise_tol = decreasing_fraction(r_u)
    if frac > cfg.max_decreasing_fraction:
        raise MonotonicityFailed(
            f"{100 * frac:.2f}% of successive pairs decrease by more than {noise_tol:.3g} px", "Step3B")

    def objective(S):
        return float(np.sum((S * r_u - r_d) ** 2))

    if cfg.variant == "median":
        k = min(cfg.n_prime_p, len(r_d))
        constraint = MedianConstraint(r_u[:k], r_d[:k])
    else:
        constraint = EpsilonConstraint(r_u, r_d, cfg.epsilon)
    try:
        S = minimize_scalar_constrained(objective, constraint, bracket=(0.5, 2.0))
    except CalibrationError as exc:
        exc.stage = "Step3B"
        raise

    A = CameraIntrinsics(S * fx, S * fr * fx, float(u0), float(v0))
    fitted = isotonic_regression(S * r_u).x
    final = RadialCurve.from_samples(r_d, fitted, (float(u0), float(v0)))
    if not final.is_monotone:
        # averaging ties cannot break monotonicity; guard against float surprises
        final = RadialCurve(final.r_d, np.maximum.accumulate(final.r_u), final.cod)
    warnings = []
    if not res.converged:
        warnings.append(f"NotConverged: {res.termination}")
    und, _ = undistort_points(data.pd, final)
    pu = project_ideal(data.pw, A, pose)
    e = total_disparity(und, pu)
    return CalibrationResult(A, pose, final, float(e.mean()), float(e.std()), "Step3B", warnings,
                             extras={"scale": float(S), "fr": float(fr), "monotonicity": m1,
                                     "monotonicity_initial": m0, "scatter": float(res.f), "decreasing_fraction": frac,
                                     "iterations": res.iterations, "variant": cfg.variant,
                                     "epsilon": cfg.epsilon, "n_prime_p": cfg.n_prime_p})


# ---------------------------------------------------------------- undistortion

def undistort_points(pts, curve: RadialCurve) -> tuple[np.ndarray, np.ndarray]:
    """Move points along their ray from the curve centre so that r_d maps to r_u.

    Piecewise-linear interpolation through (0, 0) and the samples; radii
    beyond the last sample are extrapolated from the last two samples and
    flagged. Returns the moved points and the flag array.
    """
    if not curve.is_monotone:
        raise NonMonotoneCurve("r_u decreases along the curve")
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    cod = np.asarray(curve.cod)
    r = radii(pts, cod)
    xs, ys = curve.r_d, curve.r_u
    if xs[0] > 0:
        xs, ys = np.concatenate([[0.0], xs]), np.concatenate([[0.0], ys])
    out_range = r > xs[-1]
    ru = np.interp(r, xs, ys)
    if np.any(out_range):
        if len(xs) >= 2:
            slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        else:
            slope = 1.0
        ru[out_range] = ys[-1] + slope * (r[out_range] - xs[-1])
    ratio = np.divide(ru, r, out=np.ones_like(r), where=r > 0)
    out = cod + (pts - cod) * ratio[:, None]
    out[r == 0] = pts[r == 0]
    return out, out_range


# ---------------------------------------------------------------- workflow

@dataclass
class PipelineRun:
    stages: dict[str, CalibrationResult]
    step1: Step1Params | None = None

    @property
    def final(self) -> CalibrationResult:
        return self.stages[[s for s in STAGES if s in self.stages][-1]]


def run_full_pipeline(data: CorrespondenceSet, sensor: SensorSpec,
                      mode: Literal["mb", "mf"] = "mb", cfg: ModelFreeConfig | None = None,
                      init: Literal["center", "disparity"] = "center") -> PipelineRun:
    """Step 1, Step 2, then Step 3A (``mode="mb"``) or Step 3B (``mode="mf"``).

    A failing stage raises its error with ``stage`` set and the stages
    finished so far attached as ``exc.partial``.
    """
    if mode not in ("mb", "mf"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = cfg or ModelFreeConfig(variant="median")
    run = PipelineRun({})
    stage = "Step1"
    try:
        run.step1 = step1_estimate_cod(data, sensor, init=init)
        run.stages["Step1"] = step1_result(data, run.step1)
        if run.step1.low_density:
            run.stages["Step1"].warnings.append("LowDensity")
        stage = "Step2"
        res2, curve2 = step2_init(data, run.step1.cod, sensor)
        run.stages["Step2"] = res2
        if mode == "mb":
            stage = "Step3A"
            run.stages["Step3A"] = step3a_model_based(data, res2)
        else:
            stage = "Step3B"
            run.stages["Step3B"] = step3b_model_free(data, res2, curve2, cfg)
    except CalibrationError as exc:
        exc.stage = exc.stage or stage
        exc.partial = run
        raise
    return run
