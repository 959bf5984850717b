"""Tuning-free multi-concept compositing on diffusion latents."""

from importlib.metadata import PackageNotFoundError, version

from .blending import BlendConfig, LatentBank
from .errors import (
    DimensionError,
    FormatError,
    IntegrationError,
    NumericError,
    ParameterError,
    PnpMixError,
    ScheduleError,
    StageError,
    TrainingError,
    ValidationError,
)
from .inversion import InversionRecord, invert, reconstruct
from .masks import MaskSet
from .pipeline import PipelineTrace, SceneBundle, blend, run, run_ablation
from .schedule import NoiseSchedule, build_schedule
from .tensor import BinaryMask, LatentTensor

try:
    __version__ = version("pnpmix")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "unknown"

__all__ = [
    "BinaryMask",
    "BlendConfig",
    "DimensionError",
    "FormatError",
    "IntegrationError",
    "InversionRecord",
    "LatentBank",
    "LatentTensor",
    "MaskSet",
    "NoiseSchedule",
    "NumericError",
    "ParameterError",
    "PipelineTrace",
    "PnpMixError",
    "SceneBundle",
    "ScheduleError",
    "StageError",
    "TrainingError",
    "ValidationError",
    "blend",
    "build_schedule",
    "invert",
    "reconstruct",
    "run",
    "run_ablation",
]
