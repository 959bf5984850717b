"""DDPM noise schedule tables and the two closed forms built on them."""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Literal

import numpy as np
import polars as pl

from .errors import ParameterError
from .tensor import LatentTensor, _check_same_shape

logger = logging.getLogger(__name__)

ScheduleKind = Literal["linear"]


DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


def default_beta_range(T: int) -> tuple[float, float]:
    """Linear beta endpoints used when none are given: the classic ``1e-4 .. 0.02``.

    The range does not scale with `T`; short schedules therefore end well short of pure
    noise, which keeps code-driven resampling numerically tight.
    """
    if T < 1:
        raise ParameterError(f"T must be at least 1, got {T}")
    return DEFAULT_BETA_START, DEFAULT_BETA_END


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep schedule tables, 1-indexed by ``t`` in ``1..T``.

    Tables are stored in float64 with a placeholder at index 0 so that ``beta[t]`` reads as
    written.  ``alpha_bar[0]`` is 1 by convention, which makes ``sigma[1]`` zero and the
    final denoising step deterministic.
    """

    T: int
    kind: ScheduleKind
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_timestep(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside 1..{self.T}")

    @cached_property
    def timesteps(self) -> range:
        """Sampling order, ``T`` down to 1."""
        return range(self.T, 0, -1)

    def to_polars(self) -> pl.DataFrame:
        """Schedule as a table with one row per timestep."""
        return pl.DataFrame(
            {
                "t": np.arange(1, self.T + 1),
                "beta": self.beta[1:],
                "alpha": self.alpha[1:],
                "alpha_bar": self.alpha_bar[1:],
                "sigma": self.sigma[1:],
            }
        )

    def write_csv(self, path: str) -> None:
        """Write ``(t, beta, alpha_bar, sigma)`` rows as CSV."""
        self.to_polars().select("t", "beta", "alpha_bar", "sigma").write_csv(path)


def build_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    kind: ScheduleKind = "linear",
) -> NoiseSchedule:
    """Build a DDPM schedule.

    Parameters
    ----------
    T : int
        Number of timesteps, at least 1.
    beta_start, beta_end : float
        Endpoints of the beta ramp, inclusive; ``0 < beta_start <= beta_end < 1``.
    kind : {"linear"}
        Interpolation of beta between the endpoints.

    Returns
    -------
    NoiseSchedule

    Raises
    ------
    ParameterError
        Any argument is out of range.
    """
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if kind != "linear":
        raise ParameterError(f"unknown schedule kind {kind!r}")
    T = int(T)

    beta = np.empty(T + 1, dtype=np.float64)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)  # alpha_bar[0] == 1

    sigma = np.zeros(T + 1, dtype=np.float64)
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))

    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)

    logger.debug("built %s schedule T=%d, alpha_bar[T]=%g", kind, T, alpha_bar[T])
    return NoiseSchedule(T, kind, beta, alpha, alpha_bar, sigma)


def add_noise(
    sched: NoiseSchedule, t: int, x_0: LatentTensor, eps: LatentTensor
) -> LatentTensor:
    """Forward-noise ``x_0`` to timestep `t`: ``sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps``."""
    sched.check_timestep(t)
    _check_same_shape("add_noise", x_0, eps)
    ab = sched.alpha_bar[t]
    out = np.sqrt(ab) * x_0.data.astype(np.float64) + np.sqrt(1.0 - ab) * eps.data
    return LatentTensor(out)


def posterior_mean(
    sched: NoiseSchedule, t: int, x_t: LatentTensor, eps: LatentTensor
) -> LatentTensor:
    """DDPM posterior mean ``(x_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)``.

    Evaluated elementwise in float64 and rounded once to float32.

    Raises
    ------
    ParameterError
        `t` is outside ``1..T``.
    DimensionError
        `x_t` and `eps` differ in shape.
    """
    sched.check_timestep(t)
    _check_same_shape("posterior_mean", x_t, eps)
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    out = (x_t.data.astype(np.float64) - coef * eps.data.astype(np.float64)) / np.sqrt(
        sched.alpha[t]
    )
    return LatentTensor(out)
