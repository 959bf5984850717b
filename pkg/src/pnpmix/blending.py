"""Fusion kernels: latent cloning, mask-guided noise mixing, and background dilution."""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeInt, model_validator

from .attention import DEFAULT_ALPHA
from .errors import ParameterError
from .masks import DEFAULT_ME_MARGIN, MaskSet
from .tensor import BinaryMask, LatentTensor, _check_same_shape, _check_spatial

logger = logging.getLogger(__name__)

DEFAULT_BETA = 0.8


class BlendConfig(BaseModel):
    """Guidance scales and the stage toggles of the compositing loop.

    Attributes
    ----------
    alpha : float
        Appearance guidance scale applied to concept values.
    beta : float
        Weight of the inpainted background outside the expanded concept rectangle.
    me_margin : int
        Pixels added on each side of a concept's bounding rectangle.
    attention_injection : bool
        Reference passes attend with the concept latent's keys and values.
    value_guidance : bool
        Extrapolate the injected values by `alpha`; off means plain key/value replacement.
    dilution_legacy, dilution_pp : bool
        Dilute reference latents towards the original background (legacy) or the
        inpainted background (``++``).  At most one may be set.
    ref_noise_mix : bool
        Re-synthesize each reference noise map with background noise outside its mask.
    dilution_convex : bool
        Use ``beta * z_bg + (1 - beta) * z_ref`` outside the rectangle instead of
        ``beta * z_bg``.
    """

    model_config = ConfigDict(frozen=True)

    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    me_margin: NonNegativeInt = DEFAULT_ME_MARGIN
    attention_injection: bool = True
    value_guidance: bool = True
    dilution_legacy: bool = False
    dilution_pp: bool = True
    ref_noise_mix: bool = True
    dilution_convex: bool = False

    @model_validator(mode="after")
    def check_ranges(self) -> Self:
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.dilution_legacy and self.dilution_pp:
            raise ValueError("dilution_legacy and dilution_pp are mutually exclusive")
        if self.alpha > 1.0:
            logger.warning("alpha=%g is far above the usual guidance range", self.alpha)
        return self

    @property
    def effective_alpha(self) -> float:
        """Scale handed to guided attention; 0 when value guidance is off."""
        return self.alpha if self.value_guidance else 0.0

    @property
    def dilution(self) -> str | None:
        """``"pp"``, ``"legacy"`` or None."""
        if self.dilution_pp:
            return "pp"
        if self.dilution_legacy:
            return "legacy"
        return None


@dataclass
class LatentBank:
    """Running latents of every trajectory at the current timestep.

    The sampling loop owns the bank and replaces its entries each step; the tensors
    themselves are immutable, so no two entries can alias mutable storage.
    """

    out: LatentTensor
    refs: list[LatentTensor]
    back: LatentTensor
    inpaint: LatentTensor
    pers: list[LatentTensor]
    t: int
    expanded: list[BinaryMask] = field(default_factory=list)

    def __post_init__(self) -> None:
        shape = self.back.shape
        for name, tensors in (
            ("out", [self.out]),
            ("refs", self.refs),
            ("inpaint", [self.inpaint]),
            ("pers", self.pers),
        ):
            for x in tensors:
                _check_same_shape(f"bank {name}", self.back, x)
        if len(self.refs) != len(self.pers):
            raise ParameterError(f"{len(self.refs)} reference latents for {len(self.pers)} concepts")
        logger.debug("bank of %d concepts, shape %s, t=%d", len(self.refs), shape, self.t)

    @property
    def n(self) -> int:
        return len(self.refs)


def clone_background(z_back: LatentTensor, n: int) -> tuple[LatentTensor, list[LatentTensor]]:
    """One output latent and `n` reference latents, each an independent copy of `z_back`.

    Raises
    ------
    ParameterError
        `n` is less than 1.
    """
    if n < 1:
        raise ParameterError(f"need at least one concept to clone for, got {n}")
    out = LatentTensor(z_back.data)
    return out, [LatentTensor(z_back.data) for _ in range(n)]


def mix_noise(
    eps_back: LatentTensor, eps_refs: Sequence[LatentTensor], maskset: MaskSet
) -> LatentTensor:
    """Composite noise maps through the partition: ``eps_back`` on ``M_B``, ``eps_refs[i]`` on ``M_i``.

    Every output entry is copied from exactly one input.

    Raises
    ------
    ParameterError
        No reference maps, a count differing from the mask set, or mismatched shapes.
    """
    if not eps_refs:
        raise ParameterError("mix_noise needs at least one reference noise map")
    if len(eps_refs) != maskset.n:
        raise ParameterError(f"{len(eps_refs)} reference noise maps for {maskset.n} masks")
    if eps_back.spatial_shape != maskset.shape or any(e.shape != eps_back.shape for e in eps_refs):
        raise ParameterError(
            f"noise maps {[eps_back.shape, *(e.shape for e in eps_refs)]} do not fit masks {maskset.shape}"
        )
    out = np.where(maskset.background.bits[None], eps_back.data, np.float32(0.0))
    for eps, m in zip(eps_refs, maskset.objects):
        out = np.where(m.bits[None], eps.data, out)
    return LatentTensor(out)


def resynthesize_ref_noise(
    eps_ref: LatentTensor, eps_back: LatentTensor, m: BinaryMask
) -> LatentTensor:
    """Reference noise inside `m`, background noise elsewhere."""
    _check_same_shape("resynthesize_ref_noise", eps_ref, eps_back)
    _check_spatial(eps_ref, m)
    return LatentTensor(np.where(m.bits[None], eps_ref.data, eps_back.data))


def _dilute(
    z_bg: LatentTensor,
    z_ref: LatentTensor,
    m_e: BinaryMask,
    beta: float,
    convex: bool,
) -> LatentTensor:
    _check_same_shape("background dilution", z_bg, z_ref)
    _check_spatial(z_ref, m_e)
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta}")
    exterior = np.float32(beta) * z_bg.data
    if convex:
        exterior = exterior + np.float32(1.0 - beta) * z_ref.data
    return LatentTensor(np.where(m_e.bits[None], z_ref.data, exterior))


def background_dilution_pp(
    z_inpaint: LatentTensor,
    z_ref: LatentTensor,
    m_e: BinaryMask,
    beta: float,
    *,
    convex: bool = False,
) -> LatentTensor:
    """Replace a reference latent outside its expanded rectangle by the scaled inpainted background.

    ``z_ref`` inside `m_e`; ``beta * z_inpaint`` outside (``beta * z_inpaint +
    (1 - beta) * z_ref`` with `convex`).

    Raises
    ------
    DimensionError
        Shapes of the latents or the mask disagree.
    ParameterError
        `beta` is outside ``[0, 1]``.
    """
    return _dilute(z_inpaint, z_ref, m_e, beta, convex)


def background_dilution_legacy(
    z_back: LatentTensor,
    z_ref: LatentTensor,
    m_e: BinaryMask,
    beta: float,
    *,
    convex: bool = False,
) -> LatentTensor:
    """As :func:`background_dilution_pp`, diluting towards the original background latent."""
    return _dilute(z_back, z_ref, m_e, beta, convex)
