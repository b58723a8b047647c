"""Synthetic ground-truth scenes, noise injection and the noise sweep."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import rng
from .errors import CalibrationError, EmptyGrid, PointOutsideSensor
from .geometry import (CameraIntrinsics, CorrespondenceSet, PoseParams, RadialDistortion,
                       SensorSpec, apply_distortion, apply_homography, camera_points,
                       monotone_radius, normalize, project_ideal, rotation_from_axis_angle)

logger = logging.getLogger(__name__)

# Pose #1 of the synthetic study. The published rotation (8, 16, -26) deg is
# expressed in the row-vector convention R' = R(theta)^T; the same physical
# pose in the column convention used here is theta = (-8, -16, 26) deg.
POSE1_INTRINSICS = CameraIntrinsics(9285.7, 9278.6, 1609.0, 1353.0)
POSE1_POSE = PoseParams.from_degrees((-8.0, -16.0, 26.0), (5.0, 8.0, 300.0))
POSE1_DISTORTION = RadialDistortion(-1.3, 8.8, -163.0)
SENSOR = SensorSpec(3264, 2448)
TARGET_PITCH = 5.28
GRID_SHAPE = (13, 10)
# ideal-grid pitch giving 126505 correspondences for pose #1
POSE1_SPACING = 8.317
POSE1_POINTS = 126505
POSE_FIXTURE_SEED = 20240531
# board centre on the target plane: the point of pose #1's target plane that lies
# on the optical axis, so the pinned board is imaged around the principal point
BOARD_OFFSET = (-8.13, -4.87)


@dataclass(frozen=True)
class GroundTruthScene:
    intrinsics: CameraIntrinsics
    pose: PoseParams
    distortion: RadialDistortion
    sensor: SensorSpec
    target_pitch: float = TARGET_PITCH
    grid_shape: tuple[int, int] = GRID_SHAPE
    board_offset: tuple[float, float] = BOARD_OFFSET

    @property
    def homography(self) -> np.ndarray:
        return self.intrinsics.matrix @ self.pose.matrix


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0
    allow_large: bool = False

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.sigma > 1.0 and not self.allow_large:
            raise ValueError(f"sigma={self.sigma} px is outside [0, 1]; pass allow_large=True")


def pose1_scene() -> GroundTruthScene:
    return GroundTruthScene(POSE1_INTRINSICS, POSE1_POSE, POSE1_DISTORTION, SENSOR)


def generate_dense_grid(scene: GroundTruthScene, spacing: float,
                        origin: tuple[float, float] = (0.0, 0.0)) -> CorrespondenceSet:
    """Dense correspondences from a regular grid of ideal pixels.

    Ideal points ``origin + spacing * (i, j)`` are mapped back to the target
    plane through the exact inverse homography and forward through the
    distortion; points whose distorted image falls outside the sensor are
    dropped, as are points beyond the radius where the polynomial folds back.
    """
    if not spacing >= 1.0:
        raise ValueError(f"spacing must be >= 1 px, got {spacing}")
    A, K, sensor = scene.intrinsics, scene.distortion, scene.sensor
    margin = 0.5 * max(sensor.width, sensor.height)
    ox, oy = origin
    xs = ox + spacing * np.arange(np.ceil((-margin - ox) / spacing),
                                  np.floor((sensor.width + margin - ox) / spacing) + 1)
    ys = oy + spacing * np.arange(np.ceil((-margin - oy) / spacing),
                                  np.floor((sensor.height + margin - oy) / spacing) + 1)
    gx, gy = np.meshgrid(xs, ys)
    ideal = np.column_stack([gx.ravel(), gy.ravel()])

    n = normalize(ideal, A)
    keep = n[:, 0] ** 2 + n[:, 1] ** 2 < monotone_radius(K) ** 2
    ideal = ideal[keep]
    pd = apply_distortion(ideal, A, K)
    keep = sensor.contains(pd)
    ideal, pd = ideal[keep], pd[keep]

    Hinv = np.linalg.inv(scene.homography)
    pw = apply_homography(Hinv, ideal)
    # the plane must lie in front of the camera along each back-projected ray
    front = camera_points(pw, scene.pose)[:, 2] > 0
    if not np.all(front):
        ideal, pd, pw = ideal[front], pd[front], pw[front]
    if len(pd) == 0:
        raise EmptyGrid("no grid point lands inside the sensor")
    return CorrespondenceSet(pw, pd, ideal)


def pose1_dense(spacing: float = POSE1_SPACING) -> CorrespondenceSet:
    return generate_dense_grid(pose1_scene(), spacing)


def target_grid(shape=GRID_SHAPE, pitch: float = TARGET_PITCH,
                offset: tuple[float, float] = BOARD_OFFSET) -> np.ndarray:
    """Calibration-board points (mm), centred on ``offset``, row-major."""
    nx, ny = shape
    xs = (np.arange(nx) - (nx - 1) / 2.0) * pitch + offset[0]
    ys = (np.arange(ny) - (ny - 1) / 2.0) * pitch + offset[1]
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def generate_pose_set(scenes: list[GroundTruthScene]) -> list[CorrespondenceSet]:
    out = []
    for i, scene in enumerate(scenes):
        pw = target_grid(scene.grid_shape, scene.target_pitch, scene.board_offset)
        ideal = project_ideal(pw, scene.intrinsics, scene.pose)
        pd = apply_distortion(ideal, scene.intrinsics, scene.distortion)
        outside = ~scene.sensor.contains(pd)
        if np.any(outside):
            raise PointOutsideSensor(f"pose {i + 1}: {int(outside.sum())} point(s) outside the sensor",
                                     pose_index=i)
        out.append(CorrespondenceSet(pw, pd, ideal))
    return out


def generate_pose_fixture(seed: int = POSE_FIXTURE_SEED, count: int = 20,
                          min_tilt_product: float = 1e-3) -> list[PoseParams]:
    """Pose list for the multi-pose board study; pose #1 is the pinned pose.

    Remaining poses are drawn from the portable generator and rejected when the
    board leaves the sensor or is too close to fronto-parallel.
    """
    A, K = POSE1_INTRINSICS, POSE1_DISTORTION
    pw = target_grid()
    poses = [POSE1_POSE]
    draw = 0
    while len(poses) < count:
        u = rng.uniform01(seed + draw, 6)
        draw += 1
        angles = np.array([-30.0, -30.0, -45.0]) + u[:3] * np.array([60.0, 60.0, 90.0])
        t = np.array([-20.0 + 40.0 * u[3], -15.0 + 30.0 * u[4], 350.0 + 200.0 * u[5]])
        pose = PoseParams.from_degrees(np.round(angles, 2), np.round(t, 2))
        R = rotation_from_axis_angle(pose.theta)
        if abs(R[2, 0] * R[2, 1]) < min_tilt_product:
            continue
        if np.any(camera_points(pw, pose)[:, 2] <= 0):
            continue
        pd = apply_distortion(project_ideal(pw, A, pose), A, K)
        if not np.all(SENSOR.contains(pd)):
            continue
        poses.append(pose)
    return poses


def load_pose_fixture() -> list[PoseParams]:
    text = resources.files("sic_calib").joinpath("data/poses20.csv").read_text(encoding="utf-8")
    rows = list(csv.DictReader(text.splitlines()))
    return [PoseParams.from_degrees([float(r[k]) for k in ("theta_x_deg", "theta_y_deg", "theta_z_deg")],
                                    [float(r[k]) for k in ("tx_mm", "ty_mm", "tz_mm")])
            for r in rows]


def format_pose_fixture(poses: list[PoseParams]) -> str:
    lines = ["pose,theta_x_deg,theta_y_deg,theta_z_deg,tx_mm,ty_mm,tz_mm"]
    for i, p in enumerate(poses, 1):
        vals = [*np.round(p.angles_deg, 10), *p.t]
        lines.append(",".join([str(i)] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def twenty_pose_scenes() -> list[GroundTruthScene]:
    base = pose1_scene()
    return [replace(base, pose=p) for p in load_pose_fixture()]


def add_noise(cs: CorrespondenceSet, noise: NoiseSpec) -> CorrespondenceSet:
    """Gaussian offsets on the image points only; target points stay exact."""
    if noise.sigma == 0:
        return CorrespondenceSet(cs.pw.copy(), cs.pd.copy(),
                                 None if cs.ideal is None else cs.ideal.copy())
    offsets = noise.sigma * rng.standard_normal(noise.seed, cs.pd.size).reshape(cs.pd.shape)
    return CorrespondenceSet(cs.pw.copy(), cs.pd + offsets,
                             None if cs.ideal is None else cs.ideal.copy())


SWEEP_COLUMNS = ["sigma", "mode", "parameter", "mean_error", "std_error", "n_ok", "n_fail"]


@dataclass
class SweepCell:
    sigma: float
    seed: int
    mode: str
    errors: dict[str, float] = field(default_factory=dict)
    failure: str | None = None


def _model_based_undistort(pd, result):
    from .geometry import remove_distortion
    return remove_distortion(pd, result.intrinsics, result.distortion)


def _run_cell(scene: GroundTruthScene, base: CorrespondenceSet, sigma: float, seed: int,
              modes: tuple[str, ...], cfg_factory) -> list[SweepCell]:
    from . import pipeline

    cells = {m: SweepCell(sigma, seed, m) for m in modes}
    data = add_noise(base, NoiseSpec(sigma, seed, allow_large=True))
    truth = scene.intrinsics
    try:
        step1 = pipeline.step1_estimate_cod(data, scene.sensor)
        init, curve2 = pipeline.step2_init(data, (step1.u0, step1.v0), scene.sensor)
    except CalibrationError as exc:
        for c in cells.values():
            c.failure = f"{type(exc).__name__}: {exc}"
        return list(cells.values())

    finals = {}
    for mode in modes:
        cell = cells[mode]
        try:
            if mode == "mb":
                res = pipeline.step3a_model_based(data, init)
                und = _model_based_undistort(data.pd, res)
                k_true = scene.distortion.coeffs
                for name, est, tru in zip(("k1", "k2", "k3"), res.distortion.coeffs, k_true):
                    cell.errors[name] = est - tru
            else:
                res = pipeline.step3b_model_free(data, init, curve2, cfg_factory(sigma))
                und = pipeline.undistort_points(data.pd, res.distortion)[0]
            finals[mode] = (res, und)
            A = res.intrinsics
            cell.errors.update(fx=A.fx - truth.fx, fy=A.fy - truth.fy,
                               u0=A.u0 - truth.u0, v0=A.v0 - truth.v0)
            cell.errors["undistorted_disparity"] = float(
                np.mean(np.hypot(*(und - data.ideal).T)))
        except CalibrationError as exc:
            cell.failure = f"{type(exc).__name__}: {exc}"

    if "mb" in finals and "mf" in finals:
        # signed offset of the model-free curve above the model-based one at the same points
        (mb, und_mb), (mf, und_mf) = finals["mb"], finals["mf"]
        r_mb = np.hypot(*(und_mb - mb.intrinsics.center).T)
        r_mf = np.hypot(*(und_mf - mf.intrinsics.center).T)
        cells["mf"].errors["curve_offset_vs_mb"] = float(np.median(r_mf - r_mb))
    return list(cells.values())


def default_model_free_config(sigma: float):
    from .pipeline import ModelFreeConfig
    return ModelFreeConfig(epsilon=3.5 * sigma)


def run_noise_sweep(scene: GroundTruthScene, sigmas, seeds_per_sigma: int = 10,
                    modes=("mb", "mf"), spacing: float = POSE1_SPACING,
                    cfg_factory=default_model_free_config, workers: int = 1,
                    base_seed: int = 1000) -> tuple[list[dict], list[SweepCell]]:
    """Calibrate noisy copies of one scene for every (sigma, seed, mode).

    Returns the aggregated table (one row per sigma, mode and parameter; mean and
    standard deviation of the absolute error) together with the raw cells.
    Failed cells are counted, never raised.
    """
    sigmas = [float(s) for s in sigmas]
    if any(not s >= 0 for s in sigmas):
        raise ValueError("noise levels must be non-negative")
    modes = tuple(modes)
    base = generate_dense_grid(scene, spacing)
    jobs = [(s, base_seed + 7919 * i + j) for i, s in enumerate(sigmas) for j in range(seeds_per_sigma)]

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_run_cell, scene, base, s, seed, modes, cfg_factory) for s, seed in jobs]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(scene, base, s, seed, modes, cfg_factory) for s, seed in jobs]
    cells = [c for group in results for c in group]
    return aggregate_sweep(cells, sigmas, modes), cells


def aggregate_sweep(cells: list[SweepCell], sigmas, modes) -> list[dict]:
    rows = []
    for s in sigmas:
        for mode in modes:
            group = [c for c in cells if c.sigma == s and c.mode == mode]
            ok = [c for c in group if c.failure is None]
            n_fail = len(group) - len(ok)
            params = []
            for c in ok:
                params.extend(k for k in c.errors if k not in params)
            if not params:
                rows.append(dict(sigma=s, mode=mode, parameter="none", mean_error=float("nan"),
                                 std_error=float("nan"), n_ok=0, n_fail=n_fail))
            for p in params:
                vals = np.array([c.errors[p] for c in ok if p in c.errors])
                # the curve offset is signed by construction; the rest are magnitudes
                v = vals if p == "curve_offset_vs_mb" else np.abs(vals)
                rows.append(dict(sigma=s, mode=mode, parameter=p, mean_error=float(v.mean()),
                                 std_error=float(v.std()), n_ok=len(vals), n_fail=n_fail))
    return rows
