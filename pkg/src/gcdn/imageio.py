"""Grayscale image files: binary PGM (P5) natively, PNG via optional Pillow.

8-bit values map to [0,1] by /255 on load; saving clips to [0,1] and rounds
to 8 bits. PGM keeps the pipeline dependency-free and bit-exact.
"""

from __future__ import annotations

import os

import numpy as np


def _read_pgm_token(f):
    # skip whitespace and '#' comments between header tokens
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("truncated PGM header")
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def load_pgm(path):
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM (P5) file")
        width = int(_read_pgm_token(f))
        height = int(_read_pgm_token(f))
        maxval = int(_read_pgm_token(f))
        if not 0 < maxval < 256:
            raise ValueError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
        raw = f.read(width * height)
        if len(raw) != width * height:
            raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / 255.0


def save_pgm(path, image):
    q = quantize(image)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        f.write(q.tobytes())


def quantize(image):
    """Clip to [0,1] and round to uint8."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def load_image(path):
    """Load a grayscale image as a float array in [0,1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        return load_pgm(path)
    if ext == ".png":
        from PIL import Image

        img = Image.open(path).convert("L")
        return np.asarray(img, dtype=np.float64) / 255.0
    raise ValueError(f"unsupported image format: {path}")


def save_image(path, image):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        save_pgm(path, image)
        return
    if ext == ".png":
        from PIL import Image

        Image.fromarray(quantize(image), mode="L").save(path)
        return
    raise ValueError(f"unsupported image format: {path}")


def list_images(directory):
    names = sorted(
        n
        for n in os.listdir(directory)
        if os.path.splitext(n)[1].lower() in (".pgm", ".png")
    )
    if not names:
        raise FileNotFoundError(f"no .pgm/.png images found in {directory}")
    return [os.path.join(directory, n) for n in names]
