"""Paired (corrupted, clean) dataset generation and loading.

Each pair is stored as ``{id}_corrupt.aft`` / ``{id}_clean.aft`` (1xHxW
tensors) next to a tab-separated manifest with one line per pair:
``id kind A T phi0 f seed``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aft import read_aft, write_aft
from .kspace import TRAJECTORY_KINDS, corrupt_kspace, make_trajectory
from .phantom import random_phantom, read_pgm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"


@dataclass
class SimConfig:
    kind: str = "sinusoidal-respiratory"
    amplitude_min: float = 0.5
    amplitude_max: float = 2.0
    period: float = 16.0
    phi0: float | None = None  # None: drawn per pair
    fraction: float = 0.6
    side: int = 64
    variants: int = 1  # corrupted variants per clean image
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind '{self.kind}'")
        if self.amplitude_min > self.amplitude_max or self.amplitude_min < 0:
            raise ValueError("need 0 <= amplitude_min <= amplitude_max")
        if self.side < 2 or self.side & (self.side - 1):
            raise ValueError(f"side must be a power of two, got {self.side}")
        if self.variants < 1:
            raise ValueError("variants must be >= 1")


def center_crop_scale(image: np.ndarray, side: int) -> np.ndarray:
    """Center-crop to the largest square multiple of ``side``, then block-average."""
    h, w = image.shape
    factor = min(h, w) // side
    if factor < 1:
        raise ValueError(f"image {h}x{w} smaller than target side {side}")
    span = factor * side
    top, left = (h - span) // 2, (w - span) // 2
    crop = image[top:top + span, left:left + span]
    return crop.reshape(side, factor, side, factor).mean(axis=(1, 3))


def _iter_clean_images(clean_dir: Path, side: int):
    paths = sorted(clean_dir.glob("*.pgm"))
    if not paths:
        raise ValueError(f"no .pgm images found in {clean_dir}")
    for path in paths:
        try:
            yield path.stem, center_crop_scale(read_pgm(path), side)
        except (ValueError, OSError) as err:
            logger.warning("skipping %s: %s", path, err)


def make_dataset(clean_dir, config: SimConfig, out_dir) -> list[str]:
    """Corrupt every PGM in ``clean_dir`` per the sim config; return pair ids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)

    ids = []
    manifest_lines = []
    for stem, clean in _iter_clean_images(Path(clean_dir), config.side):
        for variant in range(config.variants):
            amplitude = float(rng.uniform(config.amplitude_min, config.amplitude_max))
            phi0 = float(rng.uniform(0.0, 2.0 * np.pi)) if config.phi0 is None else config.phi0
            pair_seed = int(rng.integers(0, 2**31 - 1))
            traj = make_trajectory(config.kind, amplitude, config.period, phi0,
                                   config.fraction, pair_seed, config.side)
            corrupted = corrupt_kspace(clean, traj)

            pair_id = stem if config.variants == 1 else f"{stem}_v{variant}"
            write_aft(out_dir / f"{pair_id}_clean.aft", clean[None])
            write_aft(out_dir / f"{pair_id}_corrupt.aft", corrupted[None])
            manifest_lines.append("\t".join([
                pair_id, config.kind, repr(amplitude), repr(config.period),
                repr(phi0), repr(config.fraction), str(pair_seed),
            ]))
            ids.append(pair_id)

    if not ids:
        raise ValueError(f"no usable clean images in {clean_dir}")
    (out_dir / MANIFEST_NAME).write_text("\n".join(manifest_lines) + "\n")
    return ids


def generate_phantom_dir(out_dir, count: int, side: int, seed: int) -> Path:
    """Write ``count`` random ellipse phantoms as 16-bit PGMs; returns the dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    from .phantom import write_pgm

    for i in range(count):
        write_pgm(out_dir / f"phantom_{i:04d}.pgm", random_phantom(side, rng))
    return out_dir


def read_manifest(dataset_dir) -> list[dict]:
    """Parse the manifest; one dict per pair."""
    path = Path(dataset_dir) / MANIFEST_NAME
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        pair_id, kind, amp, period, phi0, fraction, seed = line.split("\t")
        records.append({
            "id": pair_id, "kind": kind, "amplitude": float(amp),
            "period": float(period), "phi0": float(phi0),
            "fraction": float(fraction), "seed": int(seed),
        })
    return records


def load_pairs(dataset_dir) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Load all pairs as (ids, corrupted NxCxHxW, clean NxCxHxW)."""
    dataset_dir = Path(dataset_dir)
    records = read_manifest(dataset_dir)
    ids = [r["id"] for r in records]
    corrupt = np.stack([read_aft(dataset_dir / f"{i}_corrupt.aft") for i in ids])
    clean = np.stack([read_aft(dataset_dir / f"{i}_clean.aft") for i in ids])
    return ids, corrupt, clean
