"""Image codecs (binary PPM, raw float UIMG), resizing and patch slicing.

UIMG layout: magic ``b"UIMG"``, then height, width, channels as little-endian
u32, then height*width*channels little-endian f32 pixels in row-major order.
"""

from __future__ import annotations

import struct
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog

from src.errors import DimensionError, FormatError
from src.models import ImageRaster

if TYPE_CHECKING:
    from pathlib import Path

logger = structlog.get_logger()

UIMG_MAGIC = b"UIMG"
_UIMG_HEADER = struct.Struct("<III")


def decode_uimg(blob: bytes) -> ImageRaster:
    """Decode a UIMG byte string.

    Raises:
        FormatError: On a bad magic, header or payload length.
    """
    if blob[:4] != UIMG_MAGIC:
        msg = "not a UIMG file (bad magic)"
        raise FormatError(msg)
    if len(blob) < 4 + _UIMG_HEADER.size:
        msg = "truncated UIMG header"
        raise FormatError(msg)
    h, w, c = _UIMG_HEADER.unpack_from(blob, 4)
    start = 4 + _UIMG_HEADER.size
    expected = h * w * c * 4
    if len(blob) - start != expected:
        msg = f"UIMG payload is {len(blob) - start} bytes, header implies {expected}"
        raise FormatError(msg)
    pixels = np.frombuffer(blob, dtype="<f4", offset=start).reshape(h, w, c)
    return _raster(pixels.astype(np.float64))


def encode_uimg(image: ImageRaster) -> bytes:
    header = UIMG_MAGIC + _UIMG_HEADER.pack(image.height, image.width, image.channels)
    return header + image.pixels.astype("<f4").tobytes()


def decode_ppm(blob: bytes) -> ImageRaster:
    """Decode a binary (P6) PPM with maxval up to 255.

    Raises:
        FormatError: On anything other than 8-bit P6.
    """
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            msg = "truncated PPM header"
            raise FormatError(msg)
        fields.append(blob[start:pos])
    pos += 1  # single whitespace before the raster

    if fields[0] != b"P6":
        msg = f"unsupported PPM magic {fields[0]!r}"
        raise FormatError(msg)
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as e:
        msg = "non-numeric PPM header"
        raise FormatError(msg) from e
    if not 0 < maxval <= 255:
        msg = f"unsupported PPM maxval {maxval}"
        raise FormatError(msg)
    raster = blob[pos:]
    if len(raster) != w * h * 3:
        msg = f"PPM raster is {len(raster)} bytes, header implies {w * h * 3}"
        raise FormatError(msg)
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).astype(np.float64)
    return _raster(pixels / maxval)


def encode_ppm(image: ImageRaster) -> bytes:
    pixels = image.pixels
    if image.channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    data = np.rint(pixels * 255).astype(np.uint8)
    return f"P6\n{image.width} {image.height}\n255\n".encode("ascii") + data.tobytes()


def load_image(path: Path) -> ImageRaster:
    """Read a UIMG or PPM file, chosen by its magic bytes.

    Raises:
        FormatError: If the file is unreadable or neither format.
    """
    try:
        blob = path.read_bytes()
    except OSError as e:
        msg = f"cannot read image {path}: {e}"
        raise FormatError(msg) from e
    if blob[:4] == UIMG_MAGIC:
        return decode_uimg(blob)
    if blob[:2] == b"P6":
        return decode_ppm(blob)
    msg = f"{path}: unrecognized image format"
    raise FormatError(msg)


def save_image(image: ImageRaster, path: Path) -> None:
    """Write UIMG for ``.uimg`` paths and PPM otherwise."""
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_uimg(image) if path.suffix == ".uimg" else encode_ppm(image)
    path.write_bytes(blob)


def _raster(pixels: np.ndarray[Any, Any]) -> ImageRaster:
    try:
        return ImageRaster(pixels=np.clip(pixels, 0.0, 1.0))
    except ValueError as e:
        msg = f"invalid raster: {e}"
        raise FormatError(msg) from e


def resize_nearest(image: ImageRaster, size: int) -> ImageRaster:
    """Nearest-neighbor resize to size x size."""
    if image.height == size and image.width == size:
        return image
    rows = np.arange(size) * image.height // size
    cols = np.arange(size) * image.width // size
    return ImageRaster(pixels=image.pixels[rows][:, cols])


def patchify(image: ImageRaster, patch_size: int) -> np.ndarray[Any, Any]:
    """Slice an image into flattened patches in row-major patch order.

    Args:
        image: Raster whose sides are multiples of patch_size.
        patch_size: Side P of each square patch.

    Returns:
        Array of shape ((H/P)*(W/P), P*P*channels).

    Raises:
        DimensionError: If a side is not divisible by patch_size.
    """
    h, w, c = image.pixels.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        msg = f"image {h}x{w} is not divisible into {p}x{p} patches"
        raise DimensionError(msg)
    grid = image.pixels.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // p) * (w // p), p * p * c)


def unpatchify(
    patches: np.ndarray[Any, Any], height: int, width: int, channels: int, patch_size: int
) -> ImageRaster:
    """Inverse of patchify."""
    p = patch_size
    grid = patches.reshape(height // p, width // p, p, p, channels).transpose(0, 2, 1, 3, 4)
    return ImageRaster(pixels=grid.reshape(height, width, channels))
