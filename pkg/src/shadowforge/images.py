"""8-bit grayscale image I/O: portable graymap (P5) and PNG.

Arrays are float64 in [0, 1]; files store round(255 * value). PNG goes
through Pillow, P5 is written directly.
"""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "to_uint8",
    "from_uint8",
    "save_gray",
    "load_gray",
    "png_bytes",
    "png_base64",
    "gray_from_png_bytes",
]


def to_uint8(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray, dtype=np.float64)
    return np.rint(255.0 * np.clip(gray, 0.0, 1.0)).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def save_gray(path, gray: np.ndarray) -> None:
    """Write a 2D array in [0,1] as .pgm (P5) or .png by file suffix."""
    path = Path(path)
    raw = to_uint8(gray)
    if raw.ndim != 2:
        raise ValueError(f"expected 2D grayscale array, got shape {raw.shape}")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        height, width = raw.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            fh.write(raw.tobytes())
    elif suffix == ".png":
        Image.fromarray(raw, mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image suffix {suffix!r} (use .pgm or .png)")


def load_gray(path) -> np.ndarray:
    """Read a grayscale .pgm or .png into a float64 array in [0,1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return from_uint8(_read_p5(path))
    if suffix == ".png":
        with Image.open(path) as img:
            return from_uint8(np.asarray(img.convert("L")))
    raise ValueError(f"unsupported image suffix {suffix!r} (use .pgm or .png)")


def _read_p5(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    # Header: magic, width, height, maxval; '#' comments run to end of line.
    while len(fields) < 4 and pos < len(data):
        if data[pos : pos + 1].isspace():
            pos += 1
        elif data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    if len(fields) < 4 or fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary P5 graymap")
    width, height, maxval = (int(f) for f in fields[1:4])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return raster.reshape(height, width).copy()


def png_bytes(gray: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(gray), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_base64(gray: np.ndarray) -> str:
    return base64.b64encode(png_bytes(gray)).decode("ascii")


def gray_from_png_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return from_uint8(np.asarray(img.convert("L")))
