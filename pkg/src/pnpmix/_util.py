import logging
import os
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from PIL import Image

from .tensor import BinaryMask, LatentTensor

if TYPE_CHECKING:  # pragma: no cover
    from matplotlib.axes import Axes

logger = logging.getLogger(__name__)


def plot_latent_channel(
    latent: LatentTensor,
    channel: int = 0,
    *,
    mask: BinaryMask | None = None,
    annot: bool = False,
    annot_fmt: str = ".2f",
    cbar: bool = True,
    ax: "Axes | None" = None,
    vmin: float | None = None,
    vmax: float | None = None,
    cmap: str | None = "viridis",
) -> "Axes":
    """Heatmap of one latent channel; pixels outside `mask` are left blank."""
    import seaborn as sns
    from matplotlib import pyplot as plt

    if not 0 <= channel < latent.channels:
        raise ValueError(f"channel {channel} outside 0..{latent.channels - 1}")
    if ax is None:
        _, ax = plt.subplots(figsize=(4 + int(cbar), 4))

    sns.heatmap(
        latent.data[channel],
        mask=None if mask is None else ~mask.bits,
        annot=annot,
        fmt=annot_fmt,
        cmap=cmap,
        vmin=vmin,
        vmax=vmax,
        ax=ax,
        cbar=cbar,
        cbar_kws={"label": f"channel {channel}"},
        annot_kws={"fontsize": 6},
        xticklabels=False,
        yticklabels=False,
    )

    assert ax is not None
    ax.set_aspect("equal")
    return ax


def save_heatmap(latent: LatentTensor, path: str | os.PathLike[str], channel: int = 0) -> None:
    from matplotlib import pyplot as plt

    ax = plot_latent_channel(latent, channel)
    ax.figure.savefig(path, bbox_inches="tight")
    plt.close(ax.figure)


def channel_to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max scale a 2-D array to ``0..255``; a constant array maps to 0."""
    v = values.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def save_preview_pgm(latent: LatentTensor, path: str | os.PathLike[str], channel: int = 0) -> None:
    """Write one channel as a greyscale P5 PGM, min-max scaled; preview only."""
    Image.fromarray(channel_to_uint8(latent.data[channel])).save(path, format="PPM")


def save_previews(latent: LatentTensor, stem: str | os.PathLike[str]) -> list[Path]:
    """One preview PGM per channel, named ``<stem>_c<k>.pgm``."""
    stem = Path(stem)
    paths = []
    for k in range(latent.channels):
        p = stem.with_name(f"{stem.name}_c{k}.pgm")
        save_preview_pgm(latent, p, k)
        paths.append(p)
    logger.debug("wrote %d preview images for %s", len(paths), stem)
    return paths
