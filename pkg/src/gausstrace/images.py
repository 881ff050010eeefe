"""Linear-RGB image buffers and bit-exact PPM (P6) interchange.

All rendering math stays in linear RGB; no gamma is applied on save. A
value v in [0, 1] maps to the byte floor(v * 255 + 0.5) (round half up),
and loading inverts via byte / 255, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, SceneValidationError


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major linear RGB, top row first, values in [0, 1]."""

    data: np.ndarray  # (H, W, 3) float64

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise InvalidParameterError(f"image must be (H, W, 3), got {self.data.shape}")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameterError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise InvalidParameterError("image values must lie in [0, 1]")


def quantize(img: ImageBuffer) -> np.ndarray:
    """[0, 1] floats to bytes with round-half-up."""
    return np.floor(np.clip(img.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: ImageBuffer, path: str | Path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantize(img).tobytes())


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":  # comment runs to end of line
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise SceneValidationError("truncated PPM header")
    return data[start:pos], pos


def load_image(path: str | Path) -> ImageBuffer:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        magic, pos = _read_token(data, 0)
        if magic != b"P6":
            raise SceneValidationError(f"not a P6 PPM file (magic {magic!r})")
        width_tok, pos = _read_token(data, pos)
        height_tok, pos = _read_token(data, pos)
        maxval_tok, pos = _read_token(data, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except (ValueError, SceneValidationError) as exc:
        raise SceneValidationError(f"{path}: malformed PPM header: {exc}") from exc
    if maxval != 255:
        raise SceneValidationError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise SceneValidationError(
            f"{path}: raster has {len(raster)} bytes, expected {expected}")
    pixels = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    return ImageBuffer(pixels.reshape(height, width, 3))
