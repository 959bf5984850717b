"""The noise-predictor contract and the deterministic dummy predictors."""

import abc
import logging
from dataclasses import dataclass, field

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import numpy as np

from ..attention import NO_DIRECTIVE, AttentionDirective, QKVBundle
from ..errors import NumericError, ParameterError
from ..tensor import LatentTensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ConditioningVector:
    """An opaque conditioning vector ``c`` (a text embedding stand-in)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float32, copy=True).reshape(-1)
        if arr.size == 0:
            raise ParameterError("conditioning vector must have positive dimension")
        if not np.isfinite(arr).all():
            raise NumericError("conditioning vector contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def one_hot(cls, index: int, dim: int) -> Self:
        """The embedding of discrete prompt id `index` among `dim` prompts."""
        if not 0 <= index < dim:
            raise ParameterError(f"prompt id {index} outside 0..{dim - 1}")
        v = np.zeros(dim, dtype=np.float32)
        v[index] = 1.0
        return cls(v)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def to_list(self) -> list[float]:
        return [float(v) for v in self.values]


@dataclass(frozen=True)
class PredictRequest:
    """Arguments of one ``eps_theta(x_t, t, c)`` evaluation."""

    x_t: LatentTensor
    t: int
    cond: ConditioningVector
    attention_directive: AttentionDirective = field(default=NO_DIRECTIVE)

    def __post_init__(self) -> None:
        if self.t < 1:
            raise ParameterError(f"timestep must be >= 1, got {self.t}")


class Predictor(abc.ABC):
    """Base class for noise predictors.

    Subclasses implement :meth:`predict_with_attention`.  A predictor must be safe to call
    from several threads at once; parameters are never mutated during prediction.

    Attributes
    ----------
    shape : tuple[int, int, int] | None
        Accepted latent shape, or None to accept any shape.
    cond_dim : int | None
        Accepted conditioning dimension, or None to accept any.
    """

    shape: tuple[int, int, int] | None = None
    cond_dim: int | None = None

    def check_request(self, req: PredictRequest) -> None:
        if self.shape is not None and req.x_t.shape != tuple(self.shape):
            raise ParameterError(
                f"{type(self).__name__} expects latents of shape {tuple(self.shape)}, got {req.x_t.shape}"
            )
        if self.cond_dim is not None and req.cond.dim != self.cond_dim:
            raise ParameterError(
                f"{type(self).__name__} expects cond dim {self.cond_dim}, got {req.cond.dim}"
            )

    @abc.abstractmethod
    def predict_with_attention(
        self, req: PredictRequest
    ) -> tuple[LatentTensor, tuple[QKVBundle, ...]]:
        """Predict noise and return the Q/K/V bundles of every attention layer.

        Predictors without attention layers return an empty tuple and ignore guided
        directives.
        """

    def predict(self, req: PredictRequest) -> LatentTensor:
        """Predict the noise in ``req.x_t``."""
        eps, _ = self.predict_with_attention(req)
        return eps


class ZeroPredictor(Predictor):
    """Predicts zero noise everywhere."""

    def predict_with_attention(
        self, req: PredictRequest
    ) -> tuple[LatentTensor, tuple[QKVBundle, ...]]:
        self.check_request(req)
        return LatentTensor(np.zeros(req.x_t.shape, dtype=np.float32)), ()

    def __repr__(self) -> str:
        return "ZeroPredictor()"


class IdentityScalePredictor(Predictor):
    """Predicts ``k * x_t``."""

    def __init__(self, k: float):
        if not np.isfinite(k):
            raise ParameterError(f"scale must be finite, got {k}")
        self.k = float(k)

    def predict_with_attention(
        self, req: PredictRequest
    ) -> tuple[LatentTensor, tuple[QKVBundle, ...]]:
        self.check_request(req)
        return LatentTensor(np.float32(self.k) * req.x_t.data), ()

    def __repr__(self) -> str:
        return f"IdentityScalePredictor({self.k})"
