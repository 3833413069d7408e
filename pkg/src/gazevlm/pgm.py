"""Binary PGM (P5) read/write for 8-bit grayscale session images."""

import numpy as np

from .errors import ParseError


def read_pgm(path):
    """Read an 8-bit binary PGM file into a (H, W) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    # Header tokens: magic, width, height, maxval; '#' comments allowed.
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path=path)
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval, then raster
    if tokens[0] != b"P5":
        raise ParseError(f"not a binary PGM (magic {tokens[0]!r})", path=path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ParseError("non-integer PGM dimensions", path=path)
    if maxval != 255:
        raise ParseError(f"unsupported PGM maxval {maxval} (want 255)", path=path)
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise ParseError("PGM raster shorter than width*height", path=path)
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image):
    """Write a (H, W) uint8 array as binary PGM."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D grayscale array, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())
