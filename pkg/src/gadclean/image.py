"""Raster containers and file I/O (PNG, PFM, label PNG).

Rasters are held as ``(height, width, channels)`` float64 arrays, which is the
row-major, channel-interleaved layout used by every module in the package.
Label maps are ``(height, width)`` uint8 arrays with values in ``{0, 1, IGNORE}``.

All writers are atomic: the file is assembled in a temporary sibling and moved
into place, so a failed write never leaves a partial file behind.
"""
from __future__ import annotations

import io
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import png

PathLike = Union[str, os.PathLike]

NO_CHANGE = 0
CHANGE = 1
IGNORE = 2

# label PNG encoding
_LABEL_TO_PIXEL = {NO_CHANGE: 0, CHANGE: 255, IGNORE: 128}
_PFM_HEADER = re.compile(rb"\A(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s")


class RasterError(ValueError):
    """Invalid raster contents or dimensions."""


class FormatError(OSError):
    """A file could not be decoded (malformed or unsupported variant)."""


@dataclass(frozen=True, eq=False)
class RasterF:
    """Finite floating-point raster with shape ``(height, width, channels)``.

    A 2-D array is accepted and treated as a single channel. The stored array
    is a read-only float64 copy.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise RasterError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1 or c < 1:
            raise RasterError(f"raster dimensions must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise RasterError("raster contains NaN or Inf samples")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, index: int) -> np.ndarray:
        return self.data[:, :, index]

    def __eq__(self, other):
        if not isinstance(other, RasterF):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"RasterF(height={self.height}, width={self.width}, channels={self.channels})"


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Binary change labels with an ignore sentinel, shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim != 2:
            raise RasterError(f"label map must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise RasterError(f"label map dimensions must be >= 1, got {arr.shape}")
        bad = ~np.isin(arr, (NO_CHANGE, CHANGE, IGNORE))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise RasterError(f"invalid class {arr[r, c].item()!r} at (row={r}, col={c})")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"LabelMap(height={self.height}, width={self.width})"


def as_raster(x) -> RasterF:
    return x if isinstance(x, RasterF) else RasterF(x)


def as_labels(x) -> LabelMap:
    return x if isinstance(x, LabelMap) else LabelMap(x)


def atomic_write(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def _read_png_array(path: PathLike) -> tuple[np.ndarray, int]:
    try:
        width, height, rows, info = png.Reader(filename=os.fspath(path)).read()
        if info.get("palette"):
            raise FormatError(f"{path}: palette PNGs are not supported")
        bitdepth = info["bitdepth"]
        if bitdepth not in (8, 16):
            raise FormatError(f"{path}: unsupported bit depth {bitdepth} (need 8 or 16)")
        planes = info["planes"]
        dtype = np.uint8 if bitdepth == 8 else np.uint16
        arr = np.vstack([np.asarray(row, dtype=dtype) for row in rows])
    except png.Error as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return arr.reshape(height, width, planes), bitdepth


def png_bit_depth(path: PathLike) -> int:
    try:
        info = png.Reader(filename=os.fspath(path)).read()[3]
    except png.Error as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return info["bitdepth"]


def read_png(path: PathLike) -> RasterF:
    """Read an 8- or 16-bit PNG with 1-4 channels, scaled to ``[0, 1]``.

    Alpha is kept as the last channel.
    """
    arr, bitdepth = _read_png_array(path)
    return RasterF(arr.astype(np.float64) / float(2**bitdepth - 1))


def quantize(raster: RasterF, bit_depth: int = 8) -> np.ndarray:
    """Integer samples for ``raster`` using round-half-up."""
    if bit_depth not in (8, 16):
        raise RasterError(f"bit depth must be 8 or 16, got {bit_depth}")
    data = as_raster(raster).data
    lo, hi = data.min(), data.max()
    if lo < 0.0 or hi > 1.0:
        raise RasterError(f"PNG samples must lie in [0, 1], got range [{lo}, {hi}]")
    top = 2**bit_depth - 1
    return np.floor(data * top + 0.5).astype(np.uint8 if bit_depth == 8 else np.uint16)


def write_png(raster: RasterF, path: PathLike, bit_depth: int = 8) -> None:
    raster = as_raster(raster)
    if raster.channels not in (1, 3, 4):
        raise RasterError(f"PNG output needs 1, 3 or 4 channels, got {raster.channels}")
    q = quantize(raster, bit_depth)
    writer = png.Writer(
        raster.width,
        raster.height,
        greyscale=raster.channels == 1,
        alpha=raster.channels == 4,
        bitdepth=bit_depth,
    )
    buf = io.BytesIO()
    writer.write(buf, q.reshape(raster.height, -1))
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def decode_pfm(payload: bytes, name: str = "<pfm>") -> RasterF:
    m = _PFM_HEADER.match(payload)
    if m is None:
        raise FormatError(f"{name}: malformed PFM header")
    tag, width, height, scale_tok = m.groups()
    width, height = int(width), int(height)
    try:
        scale = float(scale_tok)
    except ValueError:
        raise FormatError(f"{name}: bad PFM scale {scale_tok!r}") from None
    if scale == 0.0 or not np.isfinite(scale):
        raise FormatError(f"{name}: PFM scale must be finite and non-zero")
    if width < 1 or height < 1:
        raise FormatError(f"{name}: PFM dimensions must be >= 1")
    channels = 3 if tag == b"PF" else 1
    body = payload[m.end():]
    expected = width * height * channels * 4
    if len(body) < expected:
        raise FormatError(f"{name}: truncated PFM payload ({len(body)} of {expected} bytes)")
    if len(body) > expected:
        raise FormatError(f"{name}: {len(body) - expected} trailing bytes after PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(body, dtype=dtype).reshape(height, width, channels)
    # rows are stored bottom-to-top
    arr = arr[::-1]
    try:
        return RasterF(arr.astype(np.float64))
    except RasterError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def encode_pfm(raster: RasterF) -> bytes:
    raster = as_raster(raster)
    if raster.channels not in (1, 3):
        raise RasterError(f"PFM needs 1 or 3 channels, got {raster.channels}")
    with np.errstate(over="ignore"):
        f32 = raster.data.astype("<f4")
    if not np.isfinite(f32).all():
        raise RasterError("raster overflows single precision")
    tag = "PF" if raster.channels == 3 else "Pf"
    header = f"{tag}\n{raster.width} {raster.height}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(f32[::-1]).tobytes()


def read_pfm(path: PathLike) -> RasterF:
    """Read a grey (``Pf``) or colour (``PF``) PFM of either byte order."""
    return decode_pfm(Path(path).read_bytes(), os.fspath(path))


def write_pfm(raster: RasterF, path: PathLike) -> None:
    """Write a little-endian PFM. Samples are rounded to float32."""
    atomic_write(path, encode_pfm(raster))


def read_raster(path: PathLike) -> RasterF:
    """Dispatch on extension: ``.pfm`` or PNG."""
    if Path(path).suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)


# ---------------------------------------------------------------------------
# label maps
# ---------------------------------------------------------------------------


def labelmap_from_png(path: PathLike) -> LabelMap:
    """Decode a label PNG: 0 -> no change, 255 -> change, 128 -> ignore."""
    arr, bitdepth = _read_png_array(path)
    if bitdepth != 8 or arr.shape[2] != 1:
        raise FormatError(
            f"{path}: label PNG must be 8-bit single channel, "
            f"got {bitdepth}-bit with {arr.shape[2]} channels"
        )
    pix = arr[:, :, 0]
    bad = ~np.isin(pix, (0, 128, 255))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise RasterError(f"{path}: unexpected label pixel value {pix[r, c]} at (row={r}, col={c})")
    labels = np.full(pix.shape, NO_CHANGE, dtype=np.uint8)
    labels[pix == 255] = CHANGE
    labels[pix == 128] = IGNORE
    return LabelMap(labels)


def labels_to_pixels(labels: LabelMap) -> np.ndarray:
    lut = np.zeros(256, dtype=np.uint8)
    for cls, pixel in _LABEL_TO_PIXEL.items():
        lut[cls] = pixel
    return lut[as_labels(labels).data]


def labelmap_to_png(labels: LabelMap, path: PathLike) -> None:
    pix = labels_to_pixels(labels)
    writer = png.Writer(pix.shape[1], pix.shape[0], greyscale=True, bitdepth=8)
    buf = io.BytesIO()
    writer.write(buf, pix)
    atomic_write(path, buf.getvalue())
