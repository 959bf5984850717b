"""Engine-wide settings read from the environment, and the default checkpoint location."""

import logging
import os
from pathlib import Path

import xdg_base_dirs
from pydantic import BaseModel, ConfigDict, Field, field_validator

logger = logging.getLogger(__name__)

THREADS_ENV = "PNPMIX_THREADS"

_DEFAULT_CHECKPOINT_PATH = xdg_base_dirs.xdg_data_home() / "pnpmix" / "toy.pnpc"


class EngineSettings(BaseModel):
    """Settings shared by every command.

    Attributes
    ----------
    threads : int
        Upper bound on concurrent predictor calls (``PNPMIX_THREADS``, default 1).
    checkpoint_path : Path
        Toy denoiser checkpoint used when a command names ``toy`` without a path.
    """

    model_config = ConfigDict(frozen=True)

    threads: int = Field(default=1, ge=1)
    checkpoint_path: Path = _DEFAULT_CHECKPOINT_PATH

    @field_validator("threads", mode="before")
    @classmethod
    def parse_threads(cls, v: object) -> object:
        if isinstance(v, str):
            try:
                return int(v.strip())
            except ValueError:
                raise ValueError(f"{THREADS_ENV} must be an integer, got {v!r}") from None
        return v

    @classmethod
    def from_env(cls) -> "EngineSettings":
        values = {}
        if (threads := os.environ.get(THREADS_ENV)) is not None:
            values["threads"] = threads
        return cls(**values)


def get_settings() -> EngineSettings:
    """Current settings; the environment is read on every call."""
    return EngineSettings.from_env()


def default_checkpoint_dir() -> Path:
    """Directory of the default toy checkpoint, created on demand."""
    p = _DEFAULT_CHECKPOINT_PATH.parent
    if not p.exists():
        p.mkdir(parents=True)
    return p
