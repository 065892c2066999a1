"""Synthetic test images: ellipse phantoms and binary PGM (P5) I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# (intensity, semi-axis a, semi-axis b, x0, y0, angle degrees) on [-1, 1]^2
_HEAD_ELLIPSES = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]


def _render_ellipses(side: int, ellipses) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side]
    # pixel centers on [-1, 1]^2, y pointing up
    x = (xs + 0.5) * 2.0 / side - 1.0
    y = 1.0 - (ys + 0.5) * 2.0 / side
    img = np.zeros((side, side))
    for val, a, b, x0, y0, ang in ellipses:
        theta = np.deg2rad(ang)
        xr = (x - x0) * np.cos(theta) + (y - y0) * np.sin(theta)
        yr = -(x - x0) * np.sin(theta) + (y - y0) * np.cos(theta)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return np.clip(img, 0.0, 1.0)


def shepp_logan(side: int) -> np.ndarray:
    """Classic head phantom (modified intensities), values in [0, 1]."""
    return _render_ellipses(side, _HEAD_ELLIPSES)


def random_phantom(side: int, rng: np.random.Generator) -> np.ndarray:
    """Random ellipse phantom: one body outline plus a handful of features."""
    body_a = rng.uniform(0.55, 0.85)
    body_b = rng.uniform(0.55, 0.85)
    ellipses = [(rng.uniform(0.25, 0.5), body_a, body_b,
                 rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0, 180))]
    for _ in range(int(rng.integers(4, 9))):
        ellipses.append((
            rng.uniform(-0.3, 0.45),
            rng.uniform(0.06, 0.45),
            rng.uniform(0.06, 0.45),
            rng.uniform(-0.55, 0.55),
            rng.uniform(-0.55, 0.55),
            rng.uniform(0, 180),
        ))
    return _render_ellipses(side, ellipses)


# ---------------------------------------------------------------------------
# PGM


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM, 8- or 16-bit, normalized to [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")

    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval

    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raw.size != count:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray, maxval: int = 65535):
    """Write a [0, 1] image as binary PGM (16-bit by default)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        raise ValueError(f"expected 2-D image, got shape {img.shape}")
    quant = np.rint(img * maxval)
    payload = quant.astype(">u2" if maxval > 255 else "u1").tobytes()
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + payload)
