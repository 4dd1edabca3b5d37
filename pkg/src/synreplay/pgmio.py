"""Binary PGM (P5, maxval 255) read/write for 16x16 sample dumps."""

import numpy as np


def write_pgm(path, flat01: np.ndarray, side: int = 16) -> None:
    img = np.asarray(flat01, dtype=np.float64).reshape(side, side)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{side} {side}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: expected maxval 255")
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    return pixels.astype(np.float64).reshape(-1) / 255.0
