"""Binary PPM (P6) image export/import.

Images are float arrays of shape (H, W, 3) with channels in [0, 1]; files
use max value 255, row-major, RGB interleaved.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w, _ = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        fields.append(raw[i:j])
        i = j
    i += 1  # the single whitespace byte after maxval
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pix = np.frombuffer(raw[i : i + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0
