"""Shared fixtures. The pose-1 pipeline stages are expensive, so they run once per session."""
from __future__ import annotations

import time

import numpy as np
import pytest

from sic_calib import pipeline, synth
from sic_calib.geometry import CameraIntrinsics, PoseParams, RadialDistortion


@pytest.fixture(scope="session")
def scene():
    return synth.pose1_scene()


@pytest.fixture(scope="session")
def pose1_data(scene):
    return synth.generate_dense_grid(scene, synth.POSE1_SPACING)


@pytest.fixture(scope="session")
def step1_p1(pose1_data, scene):
    return pipeline.step1_estimate_cod(pose1_data, scene.sensor)


@pytest.fixture(scope="session")
def step2_p1(pose1_data, step1_p1, scene):
    return pipeline.step2_init(pose1_data, step1_p1.cod, scene.sensor)


@pytest.fixture(scope="session")
def step3a_p1(pose1_data, step2_p1):
    return pipeline.step3a_model_based(pose1_data, step2_p1[0])


@pytest.fixture(scope="session")
def step3b_p1(pose1_data, step2_p1):
    init, curve = step2_p1
    return pipeline.step3b_model_free(pose1_data, init, curve, pipeline.ModelFreeConfig(epsilon=0.0))


@pytest.fixture(scope="session")
def timed_mb_run(pose1_data, scene):
    t0 = time.perf_counter()
    run = pipeline.run_full_pipeline(pose1_data, scene.sensor, mode="mb")
    return run, time.perf_counter() - t0


@pytest.fixture(scope="session")
def pose_sets():
    return synth.generate_pose_set(synth.twenty_pose_scenes())


@pytest.fixture
def pose1_truth():
    return (CameraIntrinsics(9285.7, 9278.6, 1609.0, 1353.0),
            PoseParams.from_degrees((-8.0, -16.0, 26.0), (5.0, 8.0, 300.0)),
            RadialDistortion(-1.3, 8.8, -163.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
