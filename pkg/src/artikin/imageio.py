"""Minimal binary PPM/PGM reading and writing.

Depth maps are stored as 16-bit PGM in units of ``DEPTH_SCALE`` counts per
scene unit (1 count = 1 mm for metre-scale scenes); weight maps use
``WEIGHT_SCALE`` counts per unit weight. Masks are 8-bit PGM with values 0/255.
"""
from pathlib import Path

import numpy as np

DEPTH_SCALE = 1000.0
WEIGHT_SCALE = 65535.0


def encode_ppm(rgb) -> bytes:
    rgb = np.asarray(rgb, dtype=float)
    h, w, _ = rgb.shape
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + data.tobytes()


def write_ppm(path, rgb):
    Path(path).write_bytes(encode_ppm(rgb))


def _read_header(buf, magic):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"expected {magic!r} image, got {tokens[0]!r}")
    return int(tokens[1]), int(tokens[2]), int(tokens[3]), pos + 1


def read_ppm(path):
    buf = Path(path).read_bytes()
    w, h, maxval, off = _read_header(buf, b"P6")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).astype(float) / maxval


def encode_pgm(values, maxval=255) -> bytes:
    values = np.asarray(values)
    h, w = values.shape
    header = b"P5\n%d %d\n%d\n" % (w, h, maxval)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.clip(np.round(values), 0, maxval).astype(dtype)
    return header + data.tobytes()


def decode_pgm(buf: bytes):
    w, h, maxval, off = _read_header(buf, b"P5")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w).astype(np.int64)


def write_pgm(path, values, maxval=255):
    Path(path).write_bytes(encode_pgm(values, maxval))


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes())


def write_mask(path, mask):
    write_pgm(path, np.where(np.asarray(mask, bool), 255, 0), 255)


def read_mask(path):
    return read_pgm(path) > 127


def write_depth(path, depth):
    write_pgm(path, np.asarray(depth) * DEPTH_SCALE, 65535)


def write_weight(path, weight):
    write_pgm(path, np.asarray(weight) * WEIGHT_SCALE, 65535)
