"""Single-image camera calibration from dense planar correspondences."""
__version__ = "0.1.0"

from .errors import CalibrationError  # noqa: E402
from .geometry import (CameraIntrinsics, CorrespondenceSet, PoseParams,  # noqa: E402
                       RadialDistortion, SensorSpec)
from .pipeline import (CalibrationResult, ModelFreeConfig, PipelineRun, RadialCurve,  # noqa: E402
                       run_full_pipeline, step1_estimate_cod, step2_init, step3a_model_based,
                       step3b_model_free, undistort_points)

__all__ = [
    "__version__", "CalibrationError", "CameraIntrinsics", "CorrespondenceSet", "PoseParams",
    "RadialDistortion", "SensorSpec", "CalibrationResult", "ModelFreeConfig", "PipelineRun",
    "RadialCurve", "run_full_pipeline", "step1_estimate_cod", "step2_init", "step3a_model_based",
    "step3b_model_free", "undistort_points",
]
