"""Edit-friendly DDPM inversion and the noise-code driven denoising step.

Inversion noises the clean latent to every timestep independently, then extracts per-step
noise codes ``z_t = (x_{t-1} - mu_t(x_t)) / sigma_t``.  Sampling with those codes from
``x_T`` walks back through the same trajectory and lands on ``x_0``.
"""

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import numpy as np

from .config import get_settings
from .errors import FormatError, NumericError, ParameterError, ScheduleError
from .predictor.base import ConditioningVector, PredictRequest, Predictor
from .schedule import NoiseSchedule, add_noise, posterior_mean
from .tensor import LatentTensor, _check_same_shape, lincomb, read_container, write_container

logger = logging.getLogger(__name__)

RECORD_FORMAT = "pnpmix-inversion-record"


def draw_noise(seed: int, t: int, shape: tuple[int, int, int]) -> LatentTensor:
    """Standard normal noise for timestep `t`, keyed by ``(seed, t)``.

    Each timestep has its own generator, so draws do not depend on the order in which
    timesteps are visited.
    """
    if seed < 0 or t < 0:
        raise ParameterError(f"seed and t must be non-negative, got {seed}, {t}")
    rng = np.random.default_rng([seed, t])
    return LatentTensor(rng.standard_normal(shape, dtype=np.float32))


@dataclass(frozen=True, eq=False)
class InversionRecord:
    """Auxiliary trajectory and noise codes of one inverted latent.

    Attributes
    ----------
    x_0 : LatentTensor
        The inverted latent.
    x_aux : tuple[LatentTensor, ...]
        ``x_1 .. x_T``; ``x_aux[t - 1]`` is ``x_t``.
    z : tuple[LatentTensor, ...]
        Noise codes ``z_1 .. z_T``; ``z_1`` is zero since ``sigma_1 = 0``.
    final_residual : LatentTensor
        ``x_0 - mu_1(x_1)``, which the deterministic last step cannot express through a
        noise code.  Added after the last step to land exactly on ``x_0``.
    seed : int
        Seed of the noise draws.
    """

    x_0: LatentTensor
    x_aux: tuple[LatentTensor, ...]
    z: tuple[LatentTensor, ...]
    final_residual: LatentTensor
    seed: int

    def __post_init__(self) -> None:
        if len(self.x_aux) != len(self.z) or not self.x_aux:
            raise ParameterError(
                f"trajectory length {len(self.x_aux)} != code count {len(self.z)}"
            )

    @property
    def T(self) -> int:
        return len(self.x_aux)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.x_0.shape

    def x(self, t: int) -> LatentTensor:
        """``x_t`` for ``0 <= t <= T``."""
        if not 0 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside 0..{self.T}")
        return self.x_0 if t == 0 else self.x_aux[t - 1]

    def code(self, t: int) -> LatentTensor:
        """Noise code ``z_t`` for ``1 <= t <= T``."""
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside 1..{self.T}")
        return self.z[t - 1]

    def with_code(self, t: int, z_t: LatentTensor) -> Self:
        """Copy of this record with ``z_t`` replaced."""
        _check_same_shape("with_code", self.code(t), z_t)
        codes = list(self.z)
        codes[t - 1] = z_t
        return dataclasses.replace(self, z=tuple(codes))

    def save(self, path: str | os.PathLike[str]) -> None:
        """Write the record as a PNPC container."""
        blocks = {"x_0": self.x_0.data}
        blocks |= {f"x_{t}": self.x(t).data for t in range(1, self.T + 1)}
        blocks |= {f"z_{t}": self.code(t).data for t in range(1, self.T + 1)}
        blocks["final_residual"] = self.final_residual.data
        write_container(path, blocks, meta={"format": RECORD_FORMAT, "T": self.T, "seed": self.seed})

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> Self:
        meta, arrays = read_container(path)
        if meta.get("format") != RECORD_FORMAT:
            raise FormatError(f"{path} is not an inversion record")
        try:
            T = int(meta["T"])
            return cls(
                LatentTensor(arrays["x_0"]),
                tuple(LatentTensor(arrays[f"x_{t}"]) for t in range(1, T + 1)),
                tuple(LatentTensor(arrays[f"z_{t}"]) for t in range(1, T + 1)),
                LatentTensor(arrays["final_residual"]),
                int(meta["seed"]),
            )
        except KeyError as e:
            raise FormatError(f"inversion record missing {e}") from e


def _predict_all(
    predictor: Predictor,
    requests: list[PredictRequest],
    threads: int,
) -> list[LatentTensor]:
    if threads <= 1:
        return [predictor.predict(r) for r in requests]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(predictor.predict, requests))


def invert(
    x_0: LatentTensor,
    sched: NoiseSchedule,
    predictor: Predictor,
    cond: ConditioningVector,
    seed: int,
    *,
    threads: int | None = None,
) -> InversionRecord:
    """Invert `x_0` into an auxiliary trajectory and noise codes.

    Parameters
    ----------
    x_0 : LatentTensor
        Clean latent.
    sched : NoiseSchedule
        Schedule; ``sigma_t`` must be positive for every ``t > 1``.
    predictor : Predictor
        Noise predictor evaluated once per timestep.
    cond : ConditioningVector
        Conditioning used for every prediction.
    seed : int
        Seed for the per-timestep noise draws.
    threads : int, optional
        Concurrent predictor calls; defaults to the engine setting.

    Returns
    -------
    InversionRecord

    Raises
    ------
    ScheduleError
        ``sigma_t == 0`` for some ``t > 1``.
    NumericError
        A noise code is not finite.
    """
    threads = threads or get_settings().threads
    if bad := [t for t in range(2, sched.T + 1) if not sched.sigma[t] > 0]:
        raise ScheduleError(f"sigma_t is zero at t={bad[0]}; cannot extract noise codes")

    x_aux = [add_noise(sched, t, x_0, draw_noise(seed, t, x_0.shape)) for t in range(1, sched.T + 1)]
    eps = _predict_all(
        predictor,
        [PredictRequest(x_aux[t - 1], t, cond) for t in range(1, sched.T + 1)],
        threads,
    )

    def prev(t: int) -> LatentTensor:
        return x_0 if t == 1 else x_aux[t - 2]

    codes = [LatentTensor.zeros(*x_0.shape)]
    for t in range(2, sched.T + 1):
        mu = posterior_mean(sched, t, x_aux[t - 1], eps[t - 1])
        with np.errstate(all="ignore"):
            z = (prev(t).data.astype(np.float64) - mu.data) / sched.sigma[t]
        if not np.isfinite(z).all():
            raise NumericError("non-finite noise code", timestep=t)
        codes.append(LatentTensor(z))

    residual = lincomb(1.0, x_0, -1.0, posterior_mean(sched, 1, x_aux[0], eps[0]))
    logger.debug("inverted latent %s over %d steps (seed %d)", x_0.shape, sched.T, seed)
    return InversionRecord(x_0, tuple(x_aux), tuple(codes), residual, seed)


def denoise_step(
    x_t: LatentTensor,
    z_t: LatentTensor,
    sched: NoiseSchedule,
    t: int,
    eps: LatentTensor,
) -> LatentTensor:
    """One DDPM step driven by a stored noise code: ``mu_t(x_t; eps) + sigma_t z_t``.

    At ``t = 1`` the noise term vanishes because ``sigma_1 = 0``.
    """
    _check_same_shape("denoise_step", x_t, z_t)
    mu = posterior_mean(sched, t, x_t, eps)
    if sched.sigma[t] == 0:
        return mu
    return LatentTensor(mu.data.astype(np.float64) + sched.sigma[t] * z_t.data.astype(np.float64))


def apply_final_residual(x_0_hat: LatentTensor, rec: InversionRecord) -> LatentTensor:
    """Add the record's last-step residual to the output of the ``t = 1`` step."""
    return lincomb(1.0, x_0_hat, 1.0, rec.final_residual)


def reconstruct(
    rec: InversionRecord,
    sched: NoiseSchedule,
    predictor: Predictor,
    cond: ConditioningVector,
) -> LatentTensor:
    """Sample from ``x_T`` with the stored noise codes, recovering ``x_0``.

    Raises
    ------
    ParameterError
        The record and schedule lengths differ.
    """
    if rec.T != sched.T:
        raise ParameterError(f"record has {rec.T} steps, schedule has {sched.T}")
    x = rec.x(sched.T)
    for t in sched.timesteps:
        eps = predictor.predict(PredictRequest(x, t, cond))
        x = denoise_step(x, rec.code(t), sched, t, eps)
    return apply_final_residual(x, rec)
