"""PNG / binary PPM reading and writing.

Images are returned as float arrays of shape (H, W, 3) with values in [0, 1],
obtained by dividing the stored codes by the format's maximum code value.
Writing always produces 8-bit files.
"""

from __future__ import annotations

import os
import re

import numpy as np
import png

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """Raised for unreadable, corrupt or unsupported image files."""


def load_image(path, dtype=np.float32) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(PNG_SIGNATURE):
        codes, maxval = _read_png(path)
    elif head[:2] == b"P6":
        codes, maxval = _read_ppm(path)
    else:
        raise ImageFormatError(f"{path}: unrecognised magic number {head[:2]!r} (expected PNG or P6 PPM)")

    if codes.shape[2] == 1:
        codes = np.repeat(codes, 3, axis=2)
    return (codes.astype(np.float64) / maxval).astype(dtype)


def _read_png(path):
    try:
        width, height, rows, info = png.Reader(filename=path).asDirect()
        bitdepth = info["bitdepth"]
        if bitdepth not in (8, 16):
            raise ImageFormatError(f"{path}: unsupported PNG bit depth {bitdepth} (only 8 and 16)")
        planes = info["planes"]
        arr = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
    except png.Error as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    arr = arr.reshape(height, width, planes)
    if info["alpha"]:
        arr = arr[:, :, :-1]
    return arr, (1 << bitdepth) - 1


_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 2
    fields = []
    for _ in range(3):
        m = _PPM_TOKEN.match(blob, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: unsupported PPM maxval {maxval}")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * 3 * dt.itemsize
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    codes = np.frombuffer(raster, dtype=dt).reshape(height, width, 3)
    return codes, maxval


def quantize(t) -> np.ndarray:
    """Clamp to [0, 1] and map to 8-bit codes with round-half-up."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.floor(t * 255.0 + 0.5).astype(np.uint8)


def save_image(t, path) -> None:
    t = np.asarray(t)
    if t.ndim == 2:
        t = t[:, :, None]
    if t.ndim != 3 or t.shape[2] not in (1, 3):
        raise ValueError(f"save_image expects an (H, W, 1) or (H, W, 3) tensor, got shape {t.shape}")
    codes = quantize(t)
    height, width, channels = codes.shape
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)

    if path.lower().endswith((".ppm", ".pnm")):
        if channels == 1:
            codes = np.repeat(codes, 3, axis=2)
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (width, height))
            fh.write(codes.tobytes())
        return

    writer = png.Writer(width, height, greyscale=channels == 1, bitdepth=8)
    with open(path, "wb") as fh:
        writer.write_array(fh, codes.reshape(-1))
