"""Image representation, intensity quantization, neighborhoods and file I/O.

Images are 2D float arrays (row-major, values in [0, 1]). Two on-disk formats
are supported:

* binary PGM ``P5`` (8-bit, also used for label masks);
* ``LMIF``: magic ``b"LMIF"``, little-endian u32 width, u32 height, then
  width*height little-endian float32 values.
"""

import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .validation import check_levels

LMIF_MAGIC = b"LMIF"
_LMIF_HEADER = struct.Struct("<4sII")


def quantize(img, levels):
    """Map intensities to integer labels ``floor(v * levels)``.

    ``1.0`` lands in the top bin. Values outside [0, 1] (noisy diffusion
    states) are clamped into the edge bins.
    """
    levels = check_levels(levels)
    arr = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    labels = np.floor(arr * levels)
    np.clip(labels, 0, levels - 1, out=labels)
    return labels.astype(np.int32)


def dequantize(qimg, levels):
    """Bin centers of quantized labels; ``quantize(dequantize(q)) == q``."""
    return (np.asarray(qimg, dtype=np.float64) + 0.5) / levels


def normalize_minmax(img):
    """Rescale an image to span [0, 1]. Constant images map to zeros."""
    arr = np.asarray(img, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def extract_patch(qimg, center, radius):
    """Labels of the (2r+1)^2 square neighborhood, edge-clamped, in scan order."""
    qimg = np.asarray(qimg)
    row, col = center
    h, w = qimg.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"center {center} outside image of shape {qimg.shape}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    offs = np.arange(-radius, radius + 1)
    rows = np.clip(row + offs, 0, h - 1)
    cols = np.clip(col + offs, 0, w - 1)
    return qimg[np.ix_(rows, cols)].ravel()


# -- file formats -----------------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pgm(data):
    if not data.startswith(b"P5"):
        raise FormatError("not a binary PGM (expected magic 'P5')", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"missing PGM {name}", pos)
        try:
            value = int(m.group(1))
        except ValueError:
            raise FormatError(f"bad PGM {name} {m.group(1)!r}", m.start(1)) from None
        if value <= 0:
            raise FormatError(f"PGM {name} must be positive", m.start(1))
        fields.append(value)
        pos = m.end()
    width, height, maxval = fields
    if maxval > 65535:
        raise FormatError(f"PGM maxval {maxval} out of range", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("expected single whitespace after PGM header", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * dtype.itemsize
    if len(data) - pos < nbytes:
        raise FormatError(f"truncated PGM pixel data: need {nbytes} bytes, have {len(data) - pos}", len(data))
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return raw.reshape(height, width), maxval


def _read_lmif(data):
    if len(data) < _LMIF_HEADER.size:
        raise FormatError("truncated LMIF header", len(data))
    magic, width, height = _LMIF_HEADER.unpack_from(data, 0)
    if magic != LMIF_MAGIC:
        raise FormatError("bad LMIF magic", 0)
    if width == 0 or height == 0:
        raise FormatError(f"bad LMIF dimensions {width}x{height}", 4)
    need = width * height * 4
    have = len(data) - _LMIF_HEADER.size
    if have < need:
        raise FormatError(f"truncated LMIF data: need {need} bytes, have {have}", len(data))
    if have > need:
        raise FormatError("trailing bytes after LMIF data", _LMIF_HEADER.size + need)
    raw = np.frombuffer(data, dtype="<f4", count=width * height, offset=_LMIF_HEADER.size)
    return raw.reshape(height, width)


def load_image(path, normalize=False):
    """Read a PGM or LMIF file into a float64 array.

    PGM pixels are scaled by ``1/maxval``; LMIF floats are returned unchanged
    (float32 -> float64 is exact). ``normalize=True`` applies min-max scaling,
    for foreign data whose intensity range is unknown.
    """
    data = Path(path).read_bytes()
    if data.startswith(LMIF_MAGIC):
        img = _read_lmif(data).astype(np.float64)
    elif data.startswith(b"P5"):
        raw, maxval = _read_pgm(data)
        img = raw.astype(np.float64) / maxval
    else:
        raise FormatError(f"{path}: unrecognized image magic {data[:4]!r}", 0)
    return normalize_minmax(img) if normalize else img


def save_image(img, path, fmt=None):
    """Write an image as LMIF (float32) or 8-bit PGM, chosen by ``fmt`` or suffix."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {arr.shape}")
    path = Path(path)
    fmt = fmt or ("pgm" if path.suffix.lower() == ".pgm" else "lmif")
    if fmt == "pgm":
        if np.any((arr < 0) | (arr > 1)) or not np.all(np.isfinite(arr)):
            raise ValueError("8-bit export requires values in [0, 1]")
        _write_pgm(np.rint(arr * 255.0).astype(np.uint8), path)
    elif fmt == "lmif":
        h, w = arr.shape
        path.write_bytes(_LMIF_HEADER.pack(LMIF_MAGIC, w, h) + arr.astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown image format {fmt!r}")


def _write_pgm(raw, path):
    h, w = raw.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + raw.tobytes())


def save_mask(labels, path):
    """Store integer labels 0..k-1 as raw bytes in a PGM."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min() < 0 or labels.max() > 255:
        raise ValueError("mask must be 2D with labels in 0..255")
    _write_pgm(labels.astype(np.uint8), path)


def load_mask(path):
    raw, _ = _read_pgm(Path(path).read_bytes())
    return raw.astype(np.int64)
