"""Dense latent tensors, binary masks, and the PNPL / PNPC binary formats."""

import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:
    from typing import Self
except ImportError:
    from typing_extensions import Self

import numpy as np

from .errors import DimensionError, FormatError, NumericError, ParameterError

logger = logging.getLogger(__name__)

PNPL_MAGIC = b"PNPL"
PNPL_VERSION = 1
PNPC_MAGIC = b"PNPC"
PNPC_VERSION = 1

_PNPL_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("dims", "<u4", (3,))])
_PNPC_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("index_length", "<u4")])


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LatentTensor:
    """A rank-3 ``[channels, height, width]`` float32 tensor.

    LatentTensors are immutable: the constructor takes a private copy of the data and
    marks it read-only, so a tensor can be shared freely between threads and latent
    trajectories.  Every entry must be finite.

    Parameters
    ----------
    data : array_like
        Values in ``[c][h][w]`` order.  Converted to float32.

    Raises
    ------
    ParameterError
        `data` is not rank 3 or has an empty axis.
    NumericError
        `data` contains NaN or infinite values.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise ParameterError(f"LatentTensor must be rank 3, got shape {arr.shape}")
        if 0 in arr.shape:
            raise ParameterError(f"LatentTensor axes must be non-empty, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("LatentTensor contains non-finite values")
        object.__setattr__(self, "data", _readonly(arr))

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> Self:
        return cls(np.zeros((channels, height, width), dtype=np.float32))

    @classmethod
    def full(cls, shape: tuple[int, int, int], value: float) -> Self:
        return cls(np.full(shape, value, dtype=np.float32))

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_numpy(self) -> np.ndarray:
        """Return a writable float32 copy of the data."""
        return self.data.copy()

    def bit_equal(self, other: "LatentTensor") -> bool:
        """True if both tensors have the same shape and identical bit patterns."""
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    def max_abs_diff(self, other: "LatentTensor", mask: "BinaryMask | None" = None) -> float:
        """Largest absolute elementwise difference, optionally restricted to a mask."""
        _check_same_shape("max_abs_diff", self, other)
        diff = np.abs(self.data.astype(np.float64) - other.data.astype(np.float64))
        if mask is not None:
            _check_spatial(self, mask)
            diff = diff[:, mask.bits]
        return float(diff.max()) if diff.size else 0.0

    def __repr__(self) -> str:
        return f"LatentTensor(shape={self.shape})"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A hard ``[height, width]`` boolean mask; broadcast over channels when applied."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.bits, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ParameterError(f"BinaryMask must be rank 2, got shape {arr.shape}")
        if 0 in arr.shape:
            raise ParameterError(f"BinaryMask axes must be non-empty, got {arr.shape}")
        object.__setattr__(self, "bits", _readonly(arr))

    @classmethod
    def ones(cls, height: int, width: int) -> Self:
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def zeros(cls, height: int, width: int) -> Self:
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def count(self) -> int:
        """Number of true pixels."""
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def complement(self) -> "BinaryMask":
        return BinaryMask(~self.bits)

    def union(self, other: "BinaryMask") -> "BinaryMask":
        _check_mask_pair("union", self, other)
        return BinaryMask(self.bits | other.bits)

    def intersection(self, other: "BinaryMask") -> "BinaryMask":
        _check_mask_pair("intersection", self, other)
        return BinaryMask(self.bits & other.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask(shape={self.shape}, count={self.count()})"


def _check_same_shape(what: str, a: LatentTensor, b: LatentTensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(what, a.shape, b.shape)


def _check_spatial(t: LatentTensor, m: BinaryMask) -> None:
    if t.spatial_shape != m.shape:
        raise DimensionError("mask gating", t.spatial_shape, m.shape)


def _check_mask_pair(what: str, a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise DimensionError(what, a.shape, b.shape)


def hadamard(t: LatentTensor, m: BinaryMask) -> LatentTensor:
    """Gate `t` by `m`: keep entries where the mask is set, zero elsewhere.

    The same mask bit applies to every channel.

    Raises
    ------
    DimensionError
        The mask shape differs from the spatial shape of `t`.
    """
    _check_spatial(t, m)
    return LatentTensor(np.where(m.bits[None, :, :], t.data, np.float32(0.0)))


def lincomb(a: float, t1: LatentTensor, b: float, t2: LatentTensor) -> LatentTensor:
    """Return ``a*t1 + b*t2`` elementwise, evaluated in float32 in a single pass."""
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ParameterError(f"lincomb coefficients must be finite, got {a}, {b}")
    _check_same_shape("lincomb", t1, t2)
    return LatentTensor(np.float32(a) * t1.data + np.float32(b) * t2.data)


def encode_latent(t: LatentTensor) -> bytes:
    """Serialize a tensor to PNPL bytes."""
    header = np.array([(PNPL_MAGIC, PNPL_VERSION, t.shape)], dtype=_PNPL_HEADER)
    return header.tobytes() + t.data.astype("<f4").tobytes()


def decode_latent(buf: bytes, offset: int = 0, *, exact: bool = True) -> tuple[LatentTensor, int]:
    """Parse a PNPL block from `buf` at `offset`.

    Parameters
    ----------
    buf : bytes
        Buffer holding one or more PNPL blocks.
    offset : int, optional
        Start of the block, by default 0.
    exact : bool, optional
        Require that the block ends exactly at the end of `buf`, by default True.

    Returns
    -------
    tuple[LatentTensor, int]
        The tensor and the number of bytes consumed.

    Raises
    ------
    FormatError
        Bad magic, unsupported version, truncated or oversized payload.
    """
    hsize = _PNPL_HEADER.itemsize
    if len(buf) - offset < hsize:
        raise FormatError(f"PNPL header truncated: {len(buf) - offset} of {hsize} bytes")
    if buf[offset : offset + 4] != PNPL_MAGIC:
        raise FormatError(f"bad PNPL magic {bytes(buf[offset : offset + 4])!r}")
    header = np.frombuffer(buf, dtype=_PNPL_HEADER, count=1, offset=offset)[0]
    if int(header["version"]) != PNPL_VERSION:
        raise FormatError(f"unsupported PNPL version {int(header['version'])}")
    dims = tuple(int(d) for d in header["dims"])
    if 0 in dims:
        raise FormatError(f"PNPL dimensions must be positive, got {dims}")
    count = dims[0] * dims[1] * dims[2]
    end = offset + hsize + 4 * count
    if len(buf) < end:
        raise FormatError(
            f"PNPL payload truncated: expected {4 * count} bytes, found {len(buf) - offset - hsize}"
        )
    if exact and len(buf) != end:
        raise FormatError(f"{len(buf) - end} trailing bytes after PNPL payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset + hsize)
    try:
        tensor = LatentTensor(data.reshape(dims))
    except NumericError as e:
        raise FormatError("PNPL payload contains non-finite values") from e
    return tensor, end - offset


def save_latent(t: LatentTensor, path: str | os.PathLike[str]) -> None:
    """Write a tensor as a PNPL file."""
    with Path(path).open("wb") as f:
        f.write(encode_latent(t))


def load_latent(path: str | os.PathLike[str]) -> LatentTensor:
    """Read a PNPL file written by :func:`save_latent`."""
    with Path(path).open("rb") as f:
        buf = f.read()
    tensor, _ = decode_latent(buf)
    return tensor


def write_container(
    path: str | os.PathLike[str],
    blocks: Mapping[str, np.ndarray],
    meta: Mapping[str, Any] | None = None,
) -> None:
    """Write named arrays as a PNPC container of PNPL blocks with a JSON index.

    Arrays that are not rank 3 are stored as ``[1, 1, n]`` blocks; their true shape is
    kept in the index.  Output bytes are deterministic for equal inputs.
    """
    payload = bytearray()
    index_blocks = []
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float32)
        stored = arr if arr.ndim == 3 else arr.reshape(1, 1, arr.size)
        block = encode_latent(LatentTensor(stored))
        index_blocks.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "length": len(block),
            }
        )
        payload += block
    index = json.dumps(
        {"meta": dict(meta or {}), "blocks": index_blocks},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    header = np.array([(PNPC_MAGIC, PNPC_VERSION, len(index))], dtype=_PNPC_HEADER)
    with Path(path).open("wb") as f:
        f.write(header.tobytes() + index + bytes(payload))


def read_container(
    path: str | os.PathLike[str],
) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read a PNPC container.

    Returns
    -------
    tuple[dict[str, Any], dict[str, np.ndarray]]
        The ``meta`` dictionary and the named arrays, in stored order.
    """
    with Path(path).open("rb") as f:
        buf = f.read()
    hsize = _PNPC_HEADER.itemsize
    if len(buf) < hsize or buf[:4] != PNPC_MAGIC:
        raise FormatError(f"{path} is not a PNPC container")
    header = np.frombuffer(buf, dtype=_PNPC_HEADER, count=1)[0]
    if int(header["version"]) != PNPC_VERSION:
        raise FormatError(f"unsupported PNPC version {int(header['version'])}")
    index_end = hsize + int(header["index_length"])
    if len(buf) < index_end:
        raise FormatError("PNPC index truncated")
    try:
        index = json.loads(buf[hsize:index_end].decode("utf-8"))
        entries = index["blocks"]
        meta = index["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"malformed PNPC index: {e}") from e
    arrays: dict[str, np.ndarray] = {}
    for k, entry in enumerate(entries):
        try:
            name = str(entry["name"])
            start = index_end + int(entry["offset"])
            end = start + int(entry["length"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed PNPC index entry {k}: {e!r}") from e
        if start < index_end or end > len(buf):
            raise FormatError(f"PNPC block {name!r} truncated")
        tensor, _ = decode_latent(buf[start:end])
        try:
            arrays[name] = tensor.data.reshape(shape)
        except ValueError as e:
            raise FormatError(f"PNPC block {name!r}: {e}") from e
    return meta, arrays
