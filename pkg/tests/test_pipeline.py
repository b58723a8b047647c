import numpy as np
import pytest

from sic_calib import pipeline, synth
from sic_calib.errors import (CalibrationError, DistortionTooSmall, IllPosedPose, InsufficientPoints,
                              NonMonotoneCurve)
from sic_calib.geometry import (CameraIntrinsics, CorrespondenceSet, PoseParams, RadialDistortion,
                                apply_distortion, radii, remove_distortion)
from sic_calib.homography import homography_from_calibration
from sic_calib.optimize import finite_difference_jacobian
from sic_calib.pipeline import (CalibrationResult, ModelFreeConfig, RadialCurve, focal_from_homography,
                                undistort_points)


@pytest.fixture(scope="module")
def coarse_scene():
    return synth.pose1_scene()


@pytest.fixture(scope="module")
def coarse_data(coarse_scene):
    return synth.generate_dense_grid(coarse_scene, 25.0)


def scene_with(pose=None, distortion=None):
    base = synth.pose1_scene()
    return synth.GroundTruthScene(base.intrinsics, pose or base.pose,
                                  base.distortion if distortion is None else distortion, base.sensor)


def truth_result(scene, distortion=None) -> CalibrationResult:
    return CalibrationResult(scene.intrinsics, scene.pose, distortion, 0.0, 0.0, "Step2")


# ---------------------------------------------------------------- Step 1

def test_step1_cod_within_one_pixel(step1_p1, scene):
    assert np.hypot(*(step1_p1.cod - scene.intrinsics.center)) < 1.0
    assert step1_p1.converged and not step1_p1.low_density


def test_step1_collinearity_at_optimum(step1_p1, pose1_data):
    # distance of the estimated centre from the line through each (p_d, p) pair
    d = pose1_data.pd - pose1_data.ideal
    w = step1_p1.cod - pose1_data.ideal
    length = np.hypot(*d.T)
    valid = length > 1.0
    dist = np.abs(d[valid, 0] * w[valid, 1] - d[valid, 1] * w[valid, 0]) / length[valid]
    assert np.mean(dist < 0.5) >= 0.99


def test_step1_rejects_undistorted_grid():
    data = synth.generate_dense_grid(scene_with(distortion=RadialDistortion()), 25.0)
    with pytest.raises(DistortionTooSmall):
        pipeline.step1_estimate_cod(data, synth.SENSOR)


def test_step1_rejects_sparse_grid(pose_sets):
    with pytest.raises(InsufficientPoints):
        pipeline.step1_estimate_cod(pose_sets[0], synth.SENSOR)


def test_step1_initializers_agree(coarse_data, coarse_scene):
    a = pipeline.step1_estimate_cod(coarse_data, coarse_scene.sensor, init="center")
    b = pipeline.step1_estimate_cod(coarse_data, coarse_scene.sensor, init="disparity")
    assert np.hypot(*(a.cod - b.cod)) < 0.1


def test_collinearity_cost_is_zero_for_radial_pairs(scene):
    pts = np.random.default_rng(0).uniform(0, 3000, (200, 2))
    pd = apply_distortion(pts, scene.intrinsics, scene.distortion)
    c = scene.intrinsics.center
    # ideal points centred on the true COD with unit scales
    x = np.array([1.0, 1.0, c[0], c[1], c[0], c[1]])
    assert pipeline.collinearity_cost(x, pd, pts) < 1e-9
    x[2] += 5.0
    assert pipeline.collinearity_cost(x, pd, pts) > 1e-3


# ---------------------------------------------------------------- Step 2

def test_focal_closed_form_is_exact():
    A = CameraIntrinsics(8000.0, 8000.0, 1600.0, 1200.0)
    H = homography_from_calibration(A, PoseParams.from_degrees((10, -20, 5), (1, 2, 400)))
    assert focal_from_homography(H, (1600.0, 1200.0)) == pytest.approx(8000.0, rel=1e-8)


def test_fronto_parallel_pose_is_ill_posed():
    data = synth.generate_dense_grid(scene_with(pose=PoseParams(np.zeros(3), [0, 0, 300.0])), 25.0)
    with pytest.raises(IllPosedPose):
        pipeline.step2_init(data, synth.POSE1_INTRINSICS.center, synth.SENSOR)


def test_step2_curve_is_circularly_symmetric(step2_p1):
    # scatter about the local trend within each of 20 annuli, relative to the annulus
    # displacement (floored at 5 px so zero crossings do not blow up the ratio)
    _, curve = step2_p1
    disp = curve.r_u - curve.r_d
    edges = np.linspace(0, curve.r_d.max(), 21)
    idx = np.digitize(curve.r_d, edges[1:-1])
    for k in range(20):
        x, y = curve.r_d[idx == k], disp[idx == k]
        scatter = np.std(y - np.polyval(np.polyfit(x, y, 2), x))
        assert scatter < 0.02 * max(abs(y.mean()), 5.0)


def test_step2_uses_inscribed_circle(step2_p1, step1_p1, pose1_data, scene):
    res, _ = step2_p1
    mask = pipeline.inscribed_subset(pose1_data, step1_p1.cod, scene.sensor)
    assert res.extras["subset_size"] == int(mask.sum())
    R = min(step1_p1.u0, step1_p1.v0, scene.sensor.width - step1_p1.u0, scene.sensor.height - step1_p1.v0)
    assert np.all(radii(pose1_data.pd[mask], step1_p1.cod) <= R)


def test_scaling_preserves_ordering(step2_p1):
    _, curve = step2_p1
    order = np.argsort(curve.r_u, kind="stable")
    for S in (0.5, 0.98, 1.7):
        assert np.array_equal(np.argsort(S * curve.r_u, kind="stable"), order)


# ---------------------------------------------------------------- Step 3A

def test_model_jacobian_matches_finite_differences(pose1_data, scene):
    pw, pd = pose1_data.pw[::997], pose1_data.pd[::997]
    x_true = pipeline.model_parameter_vector(scene.intrinsics, scene.pose, scene.distortion)
    lower, upper = pipeline.model_bounds(scene.intrinsics, scene.pose)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = lower + rng.uniform(0.05, 0.95, 13) * (upper - lower)
        x[10:] = x_true[10:] * rng.uniform(0.5, 1.5, 3)
        J = pipeline._model_jacobian(x, pw)
        fd = finite_difference_jacobian(lambda v: pipeline._model_residuals(v, pw, pd), x, rel_step=1e-7)
        scale = np.maximum(np.abs(fd).max(axis=0), 1e-12)
        assert np.max(np.abs(J - fd) / scale) < 1e-5


def test_step3a_recovers_truth(step3a_p1, scene):
    A = step3a_p1.intrinsics
    np.testing.assert_allclose([A.fx, A.fy, A.u0, A.v0],
                               [scene.intrinsics.fx, scene.intrinsics.fy, scene.intrinsics.u0,
                                scene.intrinsics.v0], atol=1e-6)
    np.testing.assert_allclose(step3a_p1.distortion.coeffs, scene.distortion.coeffs, rtol=1e-3)
    assert step3a_p1.rpe_mean < 1e-6
    assert not any(w.startswith("BoundsActive") for w in step3a_p1.warnings)


def test_step3a_distortion_free_stays_optimal():
    scene = scene_with(distortion=RadialDistortion())
    data = synth.generate_dense_grid(scene, 25.0)
    res = pipeline.step3a_model_based(data, truth_result(scene))
    assert np.all(np.abs(res.distortion.coeffs) < 1e-6)
    assert res.rpe_mean < 1e-8


def test_step3a_noise_band(coarse_data, coarse_scene):
    # Monte-Carlo band at sigma = 0.25 px, 10 seeds, ~14k points (see the ledger for the oracle run)
    errs = []
    for seed in range(10):
        data = synth.add_noise(coarse_data, synth.NoiseSpec(0.25, 500 + seed))
        s1 = pipeline.step1_estimate_cod(data, coarse_scene.sensor)
        init, _ = pipeline.step2_init(data, s1.cod, coarse_scene.sensor)
        errs.append(pipeline.step3a_model_based(data, init).intrinsics.fx - coarse_scene.intrinsics.fx)
    errs = np.array(errs)
    assert abs(errs.mean()) < 3.0
    assert errs.std() < 6.0


# ---------------------------------------------------------------- Step 3B

def test_step3b_fixed_point_on_undistorted_data():
    scene = scene_with(distortion=RadialDistortion())
    data = synth.generate_dense_grid(scene, 25.0)
    res = pipeline.step3b_model_free(data, truth_result(scene), cfg=ModelFreeConfig(epsilon=0.0))
    assert res.extras["monotonicity"] == pytest.approx(res.extras["monotonicity_initial"], rel=1e-12)
    assert res.extras["scale"] == pytest.approx(1.0, abs=1e-9)
    assert res.intrinsics.fx == pytest.approx(scene.intrinsics.fx, rel=1e-9)


def test_step3b_result_is_monotone(step3b_p1, scene):
    assert step3b_p1.distortion.is_monotone
    assert step3b_p1.extras["monotonicity"] < step3b_p1.extras["monotonicity_initial"]
    assert step3b_p1.extras["decreasing_fraction"] <= 0.01
    assert np.hypot(step3b_p1.intrinsics.u0 - 1609.0, step3b_p1.intrinsics.v0 - 1353.0) < 1.0


def test_step3b_pose_is_close(step3b_p1, scene):
    np.testing.assert_allclose(step3b_p1.pose.angles_deg, scene.pose.angles_deg, atol=0.05)
    np.testing.assert_allclose(step3b_p1.pose.t, scene.pose.t, atol=0.5)


def test_model_free_config_validation():
    with pytest.raises(ValueError):
        ModelFreeConfig(epsilon=-1.0)
    with pytest.raises(ValueError):
        ModelFreeConfig(n_prime_p=3)
    with pytest.raises(ValueError):
        ModelFreeConfig(variant="mean")


# ---------------------------------------------------------------- undistortion

def analytic_curve(A, K, r_max=0.12, n=4000):
    rn = np.linspace(1e-4, r_max, n)
    return RadialCurve(A.fx * rn * (1 + K.factor(rn * rn)), A.fx * rn, (A.u0, A.v0))


def test_point_at_centre_unchanged():
    curve = RadialCurve([1.0, 2.0], [1.5, 2.5], (10.0, 20.0))
    out, flags = undistort_points([[10.0, 20.0]], curve)
    assert np.array_equal(out, [[10.0, 20.0]]) and not flags[0]


def test_identity_curve_is_identity(rng):
    pts = rng.uniform(0, 100, (50, 2))
    curve = RadialCurve(np.linspace(0.5, 200, 20), np.linspace(0.5, 200, 20), (50.0, 50.0))
    out, flags = undistort_points(pts, curve)
    np.testing.assert_allclose(out, pts, atol=1e-12)
    assert not flags.any()


def test_analytic_curve_recovers_ideal_points(rng):
    A = CameraIntrinsics(9000.0, 9000.0, 1600.0, 1200.0)
    K = RadialDistortion(-1.3, 8.8, -163.0)
    curve = analytic_curve(A, K)
    ideal = A.center + rng.uniform(-700, 700, (500, 2))
    pd = apply_distortion(ideal, A, K)
    out, flags = undistort_points(pd, curve)
    assert not flags.any()
    assert np.max(np.hypot(*(out - ideal).T)) < 0.01
    # and back again through the forward model
    assert np.max(np.hypot(*(apply_distortion(out, A, K) - pd).T)) < 0.01


def test_truncated_curve_flags_exterior_points():
    curve = RadialCurve([10.0, 20.0, 30.0], [11.0, 22.0, 33.0], (0.0, 0.0))
    out, flags = undistort_points([[15.0, 0.0], [40.0, 0.0]], curve)
    assert list(flags) == [False, True]
    np.testing.assert_allclose(out, [[16.5, 0.0], [44.0, 0.0]])


def test_non_monotone_curve_rejected():
    with pytest.raises(NonMonotoneCurve):
        undistort_points([[1.0, 1.0]], RadialCurve([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]))


def test_radial_curve_validation():
    with pytest.raises(ValueError):
        RadialCurve([2.0, 1.0], [1.0, 2.0])
    c = RadialCurve.from_samples([2.0, 1.0, 2.0], [4.0, 1.0, 6.0])
    np.testing.assert_array_equal(c.r_d, [1.0, 2.0])
    np.testing.assert_array_equal(c.r_u, [1.0, 5.0])


# ---------------------------------------------------------------- workflow

def test_pipeline_is_deterministic(coarse_data, coarse_scene):
    a = pipeline.run_full_pipeline(coarse_data, coarse_scene.sensor, mode="mb")
    b = pipeline.run_full_pipeline(coarse_data, coarse_scene.sensor, mode="mb")
    for stage in a.stages:
        ra, rb = a.stages[stage], b.stages[stage]
        assert ra.intrinsics == rb.intrinsics and ra.pose == rb.pose
        assert ra.rpe_mean == rb.rpe_mean
    assert a.step1 == b.step1


def test_sparse_single_pose_fails_at_step1(pose_sets):
    with pytest.raises(CalibrationError) as info:
        pipeline.run_full_pipeline(pose_sets[0], synth.SENSOR)
    assert info.value.stage == "Step1"
    assert info.value.partial.stages == {}


def test_failure_keeps_partial_stages():
    data = synth.generate_dense_grid(scene_with(pose=PoseParams(np.zeros(3), [0, 0, 300.0])), 25.0)
    with pytest.raises(IllPosedPose) as info:
        pipeline.run_full_pipeline(data, synth.SENSOR)
    assert info.value.stage == "Step2"
    assert list(info.value.partial.stages) == ["Step1"]


def test_unknown_mode(coarse_data):
    with pytest.raises(ValueError):
        pipeline.run_full_pipeline(coarse_data, synth.SENSOR, mode="xx")


def test_mismatched_lengths():
    with pytest.raises(CalibrationError):
        CorrespondenceSet(np.zeros((5, 2)), np.zeros((4, 2)))


def test_remove_distortion_matches_model(step3a_p1, pose1_data):
    pu = remove_distortion(pose1_data.pd, step3a_p1.intrinsics, step3a_p1.distortion)
    np.testing.assert_allclose(pu, pose1_data.ideal, atol=1e-6)
