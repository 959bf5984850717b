"""Scene manifests, and procedurally generated toy scenes.

A manifest is a JSON document naming the background, inpainted background, concept
latents (PNPL) and concept masks (PGM) of one compositing run, together with the
schedule and blending parameters.  Paths are relative to the manifest's directory.
"""

import logging
import os
from pathlib import Path
from typing import Literal

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt, model_validator

from ._util import save_preview_pgm
from .attention import DEFAULT_ALPHA
from .blending import DEFAULT_BETA, BlendConfig
from .errors import FormatError, ParameterError
from .masks import DEFAULT_ME_MARGIN, MaskSet, load_mask_pgm, save_mask_pgm
from .pipeline import SceneBundle
from .predictor.base import ConditioningVector
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, NoiseSchedule, build_schedule
from .tensor import BinaryMask, LatentTensor, load_latent, save_latent

logger = logging.getLogger(__name__)

MANIFEST_NAME = "scene.json"
MAX_PROCEDURAL_CONCEPTS = 3


class SceneManifest(BaseModel):
    """Contents of a scene manifest file."""

    model_config = ConfigDict(extra="forbid")

    back: str
    inpaint: str
    pers: list[str] = Field(min_length=1)
    masks: list[str] = Field(min_length=1)
    mask_back: str | None = None

    cond_dim: PositiveInt = 2
    cond_back: NonNegativeInt = 0
    cond_out: NonNegativeInt = 0
    cond_per: list[NonNegativeInt] | None = None

    seed: NonNegativeInt = 0
    T: PositiveInt = 50
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    alpha: float = DEFAULT_ALPHA
    beta_dilution: float = DEFAULT_BETA
    me_margin: NonNegativeInt = DEFAULT_ME_MARGIN
    dilution_convex: bool = False
    stage: Literal["a", "b", "c", "d", "e"] = "e"

    @model_validator(mode="after")
    def check_counts(self) -> Self:
        if len(self.masks) != len(self.pers):
            raise ValueError(f"{len(self.masks)} masks for {len(self.pers)} concept latents")
        if self.cond_per is not None and len(self.cond_per) != len(self.pers):
            raise ValueError(f"{len(self.cond_per)} concept prompt ids for {len(self.pers)} concepts")
        ids = [self.cond_back, self.cond_out, *(self.cond_per or [])]
        if bad := [i for i in ids if i >= self.cond_dim]:
            raise ValueError(f"prompt ids {bad} outside 0..{self.cond_dim - 1}")
        BlendConfig(alpha=self.alpha, beta=self.beta_dilution, me_margin=self.me_margin)
        return self

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> Self:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"file not found: {p}")
        try:
            return cls.model_validate_json(p.read_text())
        except pydantic.ValidationError as e:
            raise FormatError(f"{p}: invalid scene manifest: {e}") from e

    def write(self, path: str | os.PathLike[str]) -> None:
        Path(path).write_text(self.model_dump_json(indent=2) + "\n")

    def blend_config(self) -> BlendConfig:
        """Blending scales of this scene with the default (full-method) toggles."""
        return BlendConfig(
            alpha=self.alpha,
            beta=self.beta_dilution,
            me_margin=self.me_margin,
            dilution_convex=self.dilution_convex,
        )

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


def load_scene(path: str | os.PathLike[str]) -> tuple[SceneManifest, SceneBundle]:
    """Read a manifest and every file it names.

    Raises
    ------
    FileNotFoundError
        The manifest or a referenced file is missing.
    FormatError
        The manifest or a referenced file is malformed.
    ValidationError
        Shapes disagree or the masks do not partition the image.
    """
    p = Path(path)
    manifest = SceneManifest.from_file(p)
    root = p.parent

    def resolve(name: str) -> Path:
        f = root / name
        if not f.exists():
            raise FileNotFoundError(f"file not found: {f}")
        return f

    back = load_latent(resolve(manifest.back))
    inpaint = load_latent(resolve(manifest.inpaint))
    pers = tuple(load_latent(resolve(f)) for f in manifest.pers)
    objects = [load_mask_pgm(resolve(f)) for f in manifest.masks]
    background = load_mask_pgm(resolve(manifest.mask_back)) if manifest.mask_back else None
    maskset = MaskSet.from_objects(objects, background)

    def cond(i: int) -> ConditioningVector:
        return ConditioningVector.one_hot(i, manifest.cond_dim)

    cond_per = manifest.cond_per or [manifest.cond_out] * len(pers)
    bundle = SceneBundle(
        back,
        inpaint,
        pers,
        maskset,
        cond(manifest.cond_back),
        cond(manifest.cond_out),
        tuple(cond(i) for i in cond_per),
        manifest.seed,
    )
    logger.info("loaded scene %s: %d concepts, latents %s", p, bundle.n, bundle.shape)
    return manifest, bundle


def _concept_rects(size: int, n: int, rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """One rectangle per vertical band of the image, as ``(r0, r1, c0, c1)`` half-open."""
    band = size // n
    rects = []
    for i in range(n):
        lo, hi = i * band + 1, (i + 1) * band - 1
        w = int(rng.integers(max((hi - lo) // 2, 1), hi - lo + 1))
        c0 = int(rng.integers(lo, hi - w + 1))
        h = int(rng.integers(max(size // 4, 1), size // 2 + 1))
        r0 = int(rng.integers(1, size - h))
        rects.append((r0, r0 + h, c0, c0 + w))
    return rects


def make_scene(
    directory: str | os.PathLike[str],
    size: int,
    n: int,
    seed: int,
    *,
    channels: int = 1,
    T: int = 50,
) -> Path:
    """Write a procedural toy scene and return the manifest path.

    The background is a seeded gradient with faint placeholder rectangles where the
    concepts go; the inpainted background is the bare gradient.  Each concept latent is
    a signed Gaussian blob centred on its rectangle.  Masks are the rectangles, which lie
    in disjoint vertical bands.  Files: ``back.pnpl``, ``inpaint.pnpl``,
    ``per_<i>.pnpl``, ``mask_<i>.pgm``, ``mask_back.pgm``, ``back_preview.pgm`` and the
    manifest ``scene.json``.

    Raises
    ------
    ParameterError
        `n` outside ``1..3``, or `size` odd or too small for `n` concepts.
    """
    if not 1 <= n <= MAX_PROCEDURAL_CONCEPTS:
        raise ParameterError(f"concept count must be in 1..{MAX_PROCEDURAL_CONCEPTS}, got {n}")
    if size % 2 or size // n < 4:
        raise ParameterError(f"size must be even and at least {4 * n} for {n} concepts, got {size}")
    if channels < 1:
        raise ParameterError(f"channels must be positive, got {channels}")

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)

    slope = rng.uniform(-1.0, 1.0, size=(channels, 2))
    phase = rng.uniform(0.0, 2 * np.pi, size=channels)
    gradient = np.stack(
        [
            0.5 * (slope[k, 0] * (yy - 0.5) + slope[k, 1] * (xx - 0.5))
            + 0.1 * np.sin(2 * np.pi * (xx + yy) + phase[k])
            for k in range(channels)
        ]
    ).astype(np.float32)

    rects = _concept_rects(size, n, rng)
    back = gradient.copy()
    masks, pers = [], []
    for i, (r0, r1, c0, c1) in enumerate(rects):
        bits = np.zeros((size, size), dtype=bool)
        bits[r0:r1, c0:c1] = True
        masks.append(BinaryMask(bits))
        back[:, bits] += np.float32(0.25)

        cy, cx = (r0 + r1 - 1) / 2, (c0 + c1 - 1) / 2
        width = max(min(r1 - r0, c1 - c0) / 3, 0.75)
        blob = np.exp(-((yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2) / (2 * width**2))
        per = np.zeros((channels, size, size), dtype=np.float32)
        per[i % channels] = (1 - 2 * (i % 2)) * blob
        pers.append(LatentTensor(per))

    maskset = MaskSet.from_objects(masks)
    save_latent(LatentTensor(back), d / "back.pnpl")
    save_latent(LatentTensor(gradient), d / "inpaint.pnpl")
    for i, (per, m) in enumerate(zip(pers, masks), start=1):
        save_latent(per, d / f"per_{i}.pnpl")
        save_mask_pgm(m, d / f"mask_{i}.pgm")
    save_mask_pgm(maskset.background, d / "mask_back.pgm")
    save_preview_pgm(LatentTensor(back), d / "back_preview.pgm")

    manifest = SceneManifest(
        back="back.pnpl",
        inpaint="inpaint.pnpl",
        pers=[f"per_{i}.pnpl" for i in range(1, n + 1)],
        masks=[f"mask_{i}.pgm" for i in range(1, n + 1)],
        mask_back="mask_back.pgm",
        cond_per=[i % 2 for i in range(1, n + 1)],
        seed=seed,
        T=T,
        me_margin=max(1, size // 16),
    )
    path = d / MANIFEST_NAME
    manifest.write(path)
    logger.info("wrote %d-concept %dx%d scene to %s", n, size, size, d)
    return path

