"""Image and float-grid file I/O.

Color images: 8-bit PNG (via Pillow) and ASCII PPM. Float data (depth,
normal maps) uses a tiny binary format: magic "FGRD", version, height,
width, channels as little-endian uint32, then float32 samples in row-major
order. The magic doubles as an endianness check since it is byte-exact.
"""

import struct

import numpy as np
from PIL import Image

GRID_MAGIC = b"FGRD"
GRID_VERSION = 1
# stored little-endian; read back swapped it exposes a foreign writer
GRID_SENTINEL = 0x01020304


def to_uint8(img):
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    """img: (H, W) or (H, W, 3) floats in [0, 1]."""
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 255.0


def write_ppm(path, img):
    """ASCII (P3) PPM, always 3 channels."""
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    h, w, _ = arr.shape
    with open(path, "w") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        flat = arr.reshape(-1, 3)
        for px in flat:
            fh.write(f"{px[0]} {px[1]} {px[2]}\n")


def read_ppm(path):
    with open(path) as fh:
        tokens = []
        for line in fh:
            hash_at = line.find("#")
            if hash_at >= 0:
                line = line[:hash_at]
            tokens.extend(line.split())
    if tokens[0] != "P3":
        raise ValueError("not an ASCII PPM file")
    w, h, maxv = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:4 + 3 * w * h], dtype=np.float64)
    return data.reshape(h, w, 3) / maxv


def write_float_grid(path, arr):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("expected (H, W) or (H, W, C) array")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<IIIII", GRID_SENTINEL, GRID_VERSION, h, w, c))
        fh.write(arr.astype("<f4").tobytes())


def read_float_grid(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GRID_MAGIC:
            raise ValueError("bad float-grid magic")
        sentinel, version, h, w, c = struct.unpack("<IIIII", fh.read(20))
        if sentinel != GRID_SENTINEL:
            raise ValueError("float-grid byte order does not match; "
                             "file written on a foreign-endianness machine")
        if version != GRID_VERSION:
            raise ValueError(f"unsupported float-grid version {version}")
        data = np.frombuffer(fh.read(4 * h * w * c), dtype="<f4")
    arr = data.reshape(h, w, c).astype(np.float64)
    return arr[:, :, 0] if c == 1 else arr
