"""Self-attention and guided appearance attention over explicit Q/K/V matrices."""

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.15


@dataclass(frozen=True, eq=False)
class QKVBundle:
    """Query, key and value matrices, ``[tokens, d_k]``, for one attention evaluation."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        arrs = []
        for name in ("q", "k", "v"):
            arr = np.array(getattr(self, name), dtype=np.float32, copy=True)
            if arr.ndim != 2:
                raise ParameterError(f"{name} must be a matrix, got shape {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            arrs.append(arr)
        q, k, v = arrs
        if q.shape[1] == 0 or k.shape[1] == 0:
            raise ParameterError("d_k must be positive")
        if q.shape[1] != k.shape[1]:
            raise ParameterError(f"query width {q.shape[1]} != key width {k.shape[1]}")
        if not (q.shape[0] == k.shape[0] == v.shape[0]):
            raise ParameterError(
                f"token counts differ: q={q.shape[0]}, k={k.shape[0]}, v={v.shape[0]}"
            )

    @property
    def tokens(self) -> int:
        return int(self.q.shape[0])

    @property
    def d_k(self) -> int:
        return int(self.q.shape[1])


@dataclass(frozen=True)
class AttentionDirective:
    """How a predictor's self-attention layers should treat one forward pass.

    With ``mode="guided"`` each attention layer replaces its keys with the donor's keys
    and its values with value-guided donor values (see
    :func:`guided_appearance_attention`).  `donor` holds one bundle per attention layer,
    in layer order, captured from the donor latent's forward pass at the same timestep.
    """

    mode: Literal["none", "guided"] = "none"
    donor: tuple[QKVBundle, ...] = field(default=())
    donor_tag: str | None = None
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self) -> None:
        if self.mode not in ("none", "guided"):
            raise ParameterError(f"unknown attention mode {self.mode!r}")
        if self.mode == "guided":
            if not self.donor:
                raise ParameterError("guided attention requires donor bundles")
            if not (np.isfinite(self.alpha) and self.alpha >= 0):
                raise ParameterError(f"alpha must be finite and >= 0, got {self.alpha}")

    @property
    def is_guided(self) -> bool:
        return self.mode == "guided"


NO_DIRECTIVE = AttentionDirective()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row maximum."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention(b: QKVBundle) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d_k)) V``, evaluated in float64, returned as float32."""
    q = b.q.astype(np.float64)
    k = b.k.astype(np.float64)
    weights = softmax_rows(q @ k.T / np.sqrt(b.d_k))
    return (weights @ b.v.astype(np.float64)).astype(np.float32)


def value_guidance(v_per: np.ndarray, v_ref: np.ndarray, alpha: float) -> np.ndarray:
    """Extrapolate the concept values away from the reference values.

    ``V_per + alpha * (V_per - V_ref)``, in float32.
    """
    v_per = np.asarray(v_per, dtype=np.float32)
    v_ref = np.asarray(v_ref, dtype=np.float32)
    if v_per.shape != v_ref.shape:
        raise DimensionError("value_guidance", v_per.shape, v_ref.shape)
    if not np.isfinite(alpha):
        raise ParameterError(f"alpha must be finite, got {alpha}")
    return v_per + np.float32(alpha) * (v_per - v_ref)


def guided_appearance_attention(ref: QKVBundle, per: QKVBundle, alpha: float) -> np.ndarray:
    """Attention for a reference latent that borrows a concept latent's appearance.

    Queries come from the reference (structure); keys come from the concept latent and
    values are the value-guided concept values (appearance).

    Parameters
    ----------
    ref : QKVBundle
        Bundle computed from the reference latent.
    per : QKVBundle
        Bundle computed from the personal concept latent, same layer and timestep.
    alpha : float
        Guidance scale; 0 reduces to plain key/value replacement.

    Raises
    ------
    ParameterError
        Token counts or widths of the two bundles differ.
    """
    if ref.tokens != per.tokens or ref.d_k != per.d_k or ref.v.shape != per.v.shape:
        raise ParameterError(
            f"bundles do not pair: ref tokens={ref.tokens} d_k={ref.d_k}, "
            f"per tokens={per.tokens} d_k={per.d_k}"
        )
    guided = QKVBundle(ref.q, per.k, value_guidance(per.v, ref.v, alpha))
    return self_attention(guided)
