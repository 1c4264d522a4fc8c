"""Offline tracklet association with jointly learned, temporally constrained metrics."""

from .core import (
    Config,
    ConfigError,
    Detection,
    SegmentPlan,
    SoftassignConfig,
    TrackGenConfig,
    Trajectory,
    Tracklet,
    load_config,
    plan_segments,
    save_config,
    validate_config,
)
from .evaluation import EvalReport, evaluate
from .pipeline import PipelineError, PipelineResult, run_pipeline

__all__ = [
    "Config",
    "ConfigError",
    "Detection",
    "EvalReport",
    "PipelineError",
    "PipelineResult",
    "SegmentPlan",
    "SoftassignConfig",
    "TrackGenConfig",
    "Trajectory",
    "Tracklet",
    "evaluate",
    "load_config",
    "plan_segments",
    "run_pipeline",
    "save_config",
    "validate_config",
]

__version__ = "0.1.0"
