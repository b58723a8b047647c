"""Diagnostics: disparity under sparse vs dense coverage, and radial-curve scaling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CorrespondenceSet, SensorSpec, total_disparity
from .homography import estimate_homography, reproject
from .optimize import EpsilonConstraint, minimize_scalar_constrained
from .pipeline import RadialCurve, disparity_minimum


@dataclass(frozen=True)
class DisparityField:
    """Per-point homography disparity of one correspondence set."""
    pd: np.ndarray
    d_tot: np.ndarray

    @property
    def min(self) -> float:
        return float(self.d_tot.min())

    @property
    def max(self) -> float:
        return float(self.d_tot.max())

    @property
    def mean(self) -> float:
        return float(self.d_tot.mean())

    @property
    def argmin(self) -> np.ndarray:
        return self.pd[int(np.argmin(self.d_tot))]

    def central_minimum(self, sensor: SensorSpec) -> np.ndarray:
        """Location of the low-disparity basin in the central third of the sensor."""
        return disparity_minimum(self.pd, self.d_tot, sensor)


@dataclass(frozen=True)
class DisparityStudy:
    dense: DisparityField
    sparse: list[DisparityField]

    @property
    def sparse_max(self) -> float:
        return max(f.max for f in self.sparse)

    @property
    def contrast(self) -> float:
        """Dense max disparity over the largest per-pose sparse max."""
        m = self.sparse_max
        return float("inf") if m == 0 else self.dense.max / m

    def rows(self) -> list[dict]:
        """Summary table: one row for the dense set, one per sparse pose."""
        out = [dict(regime="dense", pose=0, n=len(self.dense.d_tot), min=self.dense.min,
                    max=self.dense.max, mean=self.dense.mean)]
        for i, f in enumerate(self.sparse, 1):
            out.append(dict(regime="sparse", pose=i, n=len(f.d_tot), min=f.min, max=f.max, mean=f.mean))
        return out


def homography_disparity(cs: CorrespondenceSet) -> DisparityField:
    """Distance between detected points and their reprojection through the fitted homography."""
    H = estimate_homography(cs.pw, cs.pd)
    return DisparityField(cs.pd, total_disparity(reproject(H, cs.pw), cs.pd))


def compare_coverage_regimes(dense: CorrespondenceSet, sparse: list[CorrespondenceSet]) -> DisparityStudy:
    """Fit one homography to the dense set and one per sparse pose, and compare disparities.

    A small board in one pose is fitted well by a homography even under strong
    distortion, so its disparity stays small; across a full-sensor grid the
    same distortion shows up as large disparities towards the image edges.
    """
    if not sparse:
        raise ValueError("need at least one sparse pose")
    return DisparityStudy(homography_disparity(dense), [homography_disparity(cs) for cs in sparse])


@dataclass(frozen=True)
class ScalingFamily:
    scales: np.ndarray
    r_d: np.ndarray
    displacement: np.ndarray  # (len(scales), len(r_d)): S * r_u - r_d
    tangent_scale: float
    tangent_index: int


def tangent_scale(curve: RadialCurve, epsilon: float = 0.0, bracket=(0.5, 2.0)) -> float:
    """Scale that makes S * r_u - r_d touch -epsilon from above at the closest point."""
    if not np.any(curve.r_u > 0):
        return float("nan")

    def objective(S):
        return float(np.sum((S * curve.r_u - curve.r_d) ** 2))

    return minimize_scalar_constrained(objective, EpsilonConstraint(curve.r_u, curve.r_d, epsilon),
                                       bracket=bracket)


def curve_scaling_family(curve: RadialCurve, scales) -> ScalingFamily:
    """Displacement curves ``S * r_u - r_d`` for each S, and the member nearest the tangent scale."""
    scales = np.asarray(scales, dtype=float).ravel()
    if scales.size == 0:
        raise ValueError("no scales given")
    disp = scales[:, None] * curve.r_u[None, :] - curve.r_d[None, :]
    s_tan = tangent_scale(curve, bracket=(min(0.5, scales.min()), max(2.0, scales.max())))
    idx = -1 if np.isnan(s_tan) else int(np.argmin(np.abs(scales - s_tan)))
    return ScalingFamily(scales, curve.r_d.copy(), disp, s_tan, idx)
