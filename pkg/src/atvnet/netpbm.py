"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np


class NetpbmError(ValueError):
    pass


def _header(magic: bytes, width: int, height: int) -> bytes:
    return b"%s\n%d %d\n255\n" % (magic, width, height)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {rgb.shape}")
    with open(path, "wb") as f:
        f.write(_header(b"P6", rgb.shape[1], rgb.shape[0]))
        f.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"expected (H, W), got {gray.shape}")
    with open(path, "wb") as f:
        f.write(_header(b"P5", gray.shape[1], gray.shape[0]))
        f.write(gray.tobytes())


def _parse(data: bytes, name: str):
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{name}: not a binary PGM/PPM file (magic {magic!r})")
    fields, pos = [], 2
    while len(fields) < 3:
        if pos >= len(data):
            raise NetpbmError(f"{name}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise NetpbmError(f"{name}: bad header field {token!r}")
            fields.append(int(token))
    pos += 1   # exactly one whitespace byte before the raster
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetpbmError(f"{name}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"{name}: only maxval 255 is supported, got {maxval}")
    return magic, width, height, data[pos:]


def read_netpbm(path) -> np.ndarray:
    """(H, W, 3) for P6, (H, W) for P5, both uint8."""
    name = os.fspath(path)
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise NetpbmError(f"{name}: {e.strerror}") from e
    magic, width, height, raster = _parse(data, name)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(raster) < need:
        raise NetpbmError(f"{name}: truncated raster ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster[:need], dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 3:
        raise NetpbmError(f"{os.fspath(path)}: expected a PPM (P6) image")
    return arr


def read_pgm(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 2:
        raise NetpbmError(f"{os.fspath(path)}: expected a PGM (P5) image")
    return arr
