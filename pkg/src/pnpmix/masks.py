"""Concept masks: validation, the derived background mask, expanded rectangles, PGM I/O."""

import logging
import os
import re
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, ParameterError, ValidationError
from .tensor import BinaryMask

logger = logging.getLogger(__name__)

DEFAULT_ME_MARGIN = 8

PGM_MAGIC = b"P5"
PGM_MAXVAL = 255

_PGM_FIELD = rb"(?:\s+(?:#[^\n]*\n\s*)*)(\d+)"
_PGM_HEADER = re.compile(rb"P5" + _PGM_FIELD * 3 + rb"\s")


def _first_pixel(bits: np.ndarray) -> tuple[int, int]:
    r, c = np.argwhere(bits)[0]
    return int(r), int(c)


def _check_objects(objects: Sequence[BinaryMask]) -> tuple[int, int]:
    if not objects:
        raise ValidationError("at least one object mask is required")
    shape = objects[0].shape
    for i, m in enumerate(objects):
        if m.shape != shape:
            raise ValidationError(f"object mask {i} has shape {m.shape}, expected {shape}")
    seen = np.zeros(shape, dtype=bool)
    for i, m in enumerate(objects):
        if (overlap := seen & m.bits).any():
            r, c = _first_pixel(overlap)
            raise ValidationError(f"object mask {i} overlaps an earlier mask at pixel ({r}, {c})")
        seen |= m.bits
    return shape


def derive_background(objects: Sequence[BinaryMask]) -> BinaryMask:
    """Background mask: every pixel no object mask claims.

    Raises
    ------
    ValidationError
        No masks, masks of differing shapes, or two masks sharing a pixel.
    """
    shape = _check_objects(objects)
    covered = np.zeros(shape, dtype=bool)
    for m in objects:
        covered |= m.bits
    return BinaryMask(~covered)


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Disjoint object masks ``M_1 .. M_n`` and the background mask ``M_B``.

    Together the masks partition the image: every pixel belongs to exactly one of them.
    Build with :meth:`from_objects`, which derives or validates the background.
    """

    objects: tuple[BinaryMask, ...]
    background: BinaryMask

    def __post_init__(self) -> None:
        expected = derive_background(self.objects)
        if self.background.shape != expected.shape:
            raise ValidationError(
                f"background mask has shape {self.background.shape}, expected {expected.shape}"
            )
        if (bad := self.background.bits != expected.bits).any():
            r, c = _first_pixel(bad)
            state = "claimed by an object" if self.background.bits[r, c] else "unassigned"
            raise ValidationError(f"background mask does not partition the image: pixel ({r}, {c}) is {state}")

    @classmethod
    def from_objects(
        cls, objects: Sequence[BinaryMask], background: BinaryMask | None = None
    ) -> Self:
        objects = tuple(objects)
        if background is None:
            return cls(objects, derive_background(objects))
        logger.debug("validating supplied background mask against %d objects", len(objects))
        return cls(objects, background)

    @property
    def n(self) -> int:
        return len(self.objects)

    @property
    def shape(self) -> tuple[int, int]:
        return self.background.shape

    @cached_property
    def label_map(self) -> np.ndarray:
        """``[H, W]`` int array: 0 on the background, ``i`` on object ``i`` (1-based)."""
        labels = np.zeros(self.shape, dtype=np.int64)
        for i, m in enumerate(self.objects, start=1):
            labels[m.bits] = i
        return labels

    def without(self, i: int) -> "MaskSet":
        """This set with object ``i`` (0-based) folded into the background."""
        if not 0 <= i < self.n:
            raise ParameterError(f"object index {i} outside 0..{self.n - 1}")
        return MaskSet.from_objects(self.objects[:i] + self.objects[i + 1 :])


def expand_to_rect(m: BinaryMask, margin: int) -> BinaryMask:
    """Filled bounding rectangle of `m`, grown by `margin` pixels per side and clipped.

    Raises
    ------
    ValidationError
        `m` has no true pixel.
    ParameterError
        `margin` is negative.
    """
    if margin < 0:
        raise ParameterError(f"margin must be non-negative, got {margin}")
    if m.is_empty():
        raise ValidationError("cannot expand an empty mask")
    rows = np.flatnonzero(m.bits.any(axis=1))
    cols = np.flatnonzero(m.bits.any(axis=0))
    r0, r1 = max(rows[0] - margin, 0), min(rows[-1] + margin, m.height - 1)
    c0, c1 = max(cols[0] - margin, 0), min(cols[-1] + margin, m.width - 1)
    out = np.zeros(m.shape, dtype=bool)
    out[r0 : r1 + 1, c0 : c1 + 1] = True
    return BinaryMask(out)


def load_mask_pgm(path: str | os.PathLike[str]) -> BinaryMask:
    """Read a binary P5 PGM: 0 is false, 255 is true.

    Raises
    ------
    FileNotFoundError
        `path` does not exist.
    FormatError
        Not a binary PGM, maxval other than 255, or a pixel other than 0 or 255.
    """
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    with p.open("rb") as f:
        head = f.read(512)
    if head[:2] != PGM_MAGIC:
        raise FormatError(f"{p}: expected binary PGM (P5), got magic {head[:2]!r}")
    if (hm := _PGM_HEADER.match(head)) is None:
        raise FormatError(f"{p}: malformed PGM header")
    if (maxval := int(hm.group(3))) != PGM_MAXVAL:
        raise FormatError(f"{p}: maxval is {maxval}, expected {PGM_MAXVAL}")
    try:
        with Image.open(p) as im:
            mode = im.mode
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise FormatError(f"{p}: unreadable PGM: {e}") from e
    if mode != "L":
        raise FormatError(f"{p}: expected 8-bit greyscale, got mode {mode}")
    if (bad := (arr != 0) & (arr != 255)).any():
        r, c = _first_pixel(bad)
        raise FormatError(f"{p}: pixel ({r}, {c}) has value {arr[r, c]}, expected 0 or 255")
    return BinaryMask(arr == 255)


def save_mask_pgm(m: BinaryMask, path: str | os.PathLike[str]) -> None:
    """Write `m` as a binary P5 PGM with maxval 255."""
    Image.fromarray(np.where(m.bits, 255, 0).astype(np.uint8)).save(path, format="PPM")
