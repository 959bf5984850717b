"""Noise predictors: the contract, dummies, the toy denoiser, and file exchange."""

from pathlib import Path

from ..errors import ParameterError
from .base import (
    ConditioningVector,
    IdentityScalePredictor,
    PredictRequest,
    Predictor,
    ZeroPredictor,
)
from .exchange import FileExchangePredictor, file_exchange_predict
from .toy import ToyConfig, ToyDenoiser, ToyPredictor
from .training import (
    TrainingExample,
    TrainingReport,
    gradient_check,
    load_dataset,
    make_blob_dataset,
    save_dataset,
    train_toy,
)


def load_predictor(spec: str, default_checkpoint: Path | None = None) -> Predictor:
    """Build a predictor from a short textual description.

    ``zero``, ``identity:<k>``, ``toy`` (default checkpoint), ``toy:<path>``, or
    ``exchange:<directory>``.
    """
    kind, _, arg = spec.partition(":")
    match kind:
        case "zero":
            return ZeroPredictor()
        case "identity":
            try:
                return IdentityScalePredictor(float(arg or 1.0))
            except ValueError as e:
                raise ParameterError(f"bad identity scale {arg!r}") from e
        case "toy":
            path = Path(arg) if arg else default_checkpoint
            if path is None:
                raise ParameterError("no toy checkpoint given and no default configured")
            if not path.exists():
                raise FileNotFoundError(f"file not found: {path}")
            return ToyPredictor.from_checkpoint(path)
        case "exchange":
            if not arg:
                raise ParameterError("exchange predictor needs a directory")
            return FileExchangePredictor(arg)
        case _:
            raise ParameterError(f"unknown predictor {spec!r}")


__all__ = [
    "ConditioningVector",
    "FileExchangePredictor",
    "IdentityScalePredictor",
    "PredictRequest",
    "Predictor",
    "ToyConfig",
    "ToyDenoiser",
    "ToyPredictor",
    "TrainingExample",
    "TrainingReport",
    "ZeroPredictor",
    "file_exchange_predict",
    "gradient_check",
    "load_dataset",
    "load_predictor",
    "make_blob_dataset",
    "save_dataset",
    "train_toy",
]
