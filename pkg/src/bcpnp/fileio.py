"""Plain-file handling: PGM grayscale images and CSV matrices.

Images are exchanged as floats in [0, 1]; PGM rasters (ASCII P2 or binary
P5, 8- or 16-bit) are scaled by their declared maxval on read and
quantized on write.  16-bit binary rasters use the most-significant-byte-
first order of the format.
"""

from __future__ import annotations

import numpy as np


def read_pgm(path):
    """Read a P2/P5 grayscale image as floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, fields, offset = _parse_header(data)
    width, height, maxval = fields
    if magic == b"P2":
        values = np.array(data[offset:].split(), dtype=np.float64)
        if values.size != width * height:
            raise ValueError("ASCII raster size mismatch")
        img = values.reshape(height, width)
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = width * height
        raster = data[offset : offset + count * dtype.itemsize]
        if len(raster) != count * dtype.itemsize:
            raise ValueError("binary raster truncated")
        img = np.frombuffer(raster, dtype=dtype).reshape(height, width)
        img = img.astype(np.float64)
    return img / float(maxval)


def _parse_header(data):
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"not a PGM file (magic {magic!r})")
    fields = []
    pos = 2
    while len(fields) < 3:
        # skip whitespace and # comments between header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval precedes the raster
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval {maxval} out of range")
    return magic, (width, height, maxval), pos


def write_pgm(path, image, maxval=65535):
    """Write floats in [0, 1] as a binary P5 image (clipped, quantized)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval {maxval} out of range")
    quant = np.round(np.clip(img, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quant.astype(dtype).tobytes())


def load_matrix_csv(path):
    """Read a 2-D comma-separated float matrix."""
    arr = np.genfromtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if np.any(np.isnan(arr)):
        raise ValueError(f"non-numeric entries in {path}")
    return arr


def save_matrix_csv(path, array):
    arr = np.atleast_2d(np.asarray(array, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
