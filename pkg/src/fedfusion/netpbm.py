"""Binary PGM ("P5") and PPM ("P6") reading and writing, maxval 255.

Parsing is strict: a bad magic number, malformed header, wrong maxval, or a
pixel payload that does not match the declared dimensions raises a structured
error, so callers can treat any NetpbmError as a corrupted file.
"""

from __future__ import annotations

import numpy as np

from .errors import BadNetpbmHeaderError, TruncatedNetpbmError


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and '#' comments, then read one token.
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise BadNetpbmHeaderError("header ended before all fields were read")
    return data[start:pos], pos


def parse_netpbm(data: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into a uint8 array [H, W, C] (C = 1 or 3)."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise BadNetpbmHeaderError(f"bad magic {data[:2]!r}; expected P5 or P6")
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise BadNetpbmHeaderError(f"non-numeric header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise BadNetpbmHeaderError(f"non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise BadNetpbmHeaderError(f"unsupported maxval {maxval}; only 255 is accepted")
    pos += 1  # exactly one whitespace byte separates header and raster
    expected = width * height * channels
    raster = data[pos : pos + expected]
    if len(raster) < expected:
        raise TruncatedNetpbmError(f"raster has {len(raster)} bytes, header declares {expected}")
    if len(data) - pos > expected:
        raise BadNetpbmHeaderError(f"{len(data) - pos - expected} trailing bytes after raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.copy()


def read_netpbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_netpbm(fh.read())


def encode_netpbm(pixels: np.ndarray) -> bytes:
    """Encode a uint8 [H, W, 1|3] array as binary PGM/PPM."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    magic = b"P5" if c == 1 else b"P6"
    if c not in (1, 3):
        raise BadNetpbmHeaderError(f"cannot encode {c}-channel image")
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + pixels.astype(np.uint8).tobytes()


def write_netpbm(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_netpbm(pixels))
