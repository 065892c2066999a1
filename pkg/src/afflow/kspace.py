"""Respiratory motion corruption in k-space and the nonlinear artifact
composition model.

Motion between phase-encode lines shows up as a per-line phase error in
k-space: line ky acquired with the object displaced by (p(ky), q(ky)) pixels
picks up the factor exp(-i*2*pi*(kx*p(ky) + ky*q(ky))), with kx, ky the
centered integer frequency indices normalized by the image extents. A
constant trajectory is therefore exactly a circular spatial shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_pow2(h: int, w: int):
    if h < 2 or w < 2 or (h & (h - 1)) or (w & (w - 1)):
        raise ValueError(f"extents must be powers of two >= 2, got {h}x{w}")


def fft2(grid: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT (image space -> k-space)."""
    grid = np.asarray(grid)
    _check_pow2(*grid.shape[-2:])
    return np.fft.fft2(grid, norm="ortho")


def ifft2(grid: np.ndarray) -> np.ndarray:
    """Unitary 2-D inverse DFT (k-space -> image space)."""
    grid = np.asarray(grid)
    _check_pow2(*grid.shape[-2:])
    return np.fft.ifft2(grid, norm="ortho")


@dataclass(frozen=True)
class MotionTrajectory:
    """Per-phase-encode-line pixel displacements along x (p) and y (q)."""

    p: np.ndarray
    q: np.ndarray
    kind: str
    amplitude: float
    period: float
    phi0: float
    fraction: float
    seed: int

    def __post_init__(self):
        if len(self.p) != len(self.q):
            raise ValueError("p and q must have equal length")


TRAJECTORY_KINDS = ("rigid-constant", "sinusoidal-respiratory")


def corrupted_line_mask(height: int, fraction: float) -> np.ndarray:
    """Boolean mask (standard FFT row order) of corrupted phase-encode lines.

    The round(fraction*height) lines of highest |ky| carry the corruption;
    the centered band around DC is protected to preserve contrast.
    """
    n_corrupt = int(round(fraction * height))
    centered = np.abs(np.fft.fftfreq(height) * height)
    order = np.argsort(-centered, kind="stable")  # outermost frequencies first
    mask = np.zeros(height, dtype=bool)
    mask[order[:n_corrupt]] = True
    return mask


def make_trajectory(kind: str, amplitude: float, period: float, phi0: float,
                    fraction: float, seed: int, height: int) -> MotionTrajectory:
    """Build a displacement trajectory over ``height`` phase-encode lines.

    sinusoidal-respiratory: p(j) = A*sin(2*pi*j/T + phi0) on corrupted lines,
    q likewise with an independent seed-drawn phase. rigid-constant: p = A,
    q = 0 on corrupted lines.
    """
    if kind not in TRAJECTORY_KINDS:
        raise ValueError(f"unknown trajectory kind '{kind}'")
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    if period < 2:
        raise ValueError(f"period must be >= 2 lines, got {period}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")

    mask = corrupted_line_mask(height, fraction)
    lines = np.arange(height, dtype=np.float64)
    if kind == "rigid-constant":
        p = np.where(mask, amplitude, 0.0)
        q = np.zeros(height)
    else:
        rng = np.random.default_rng(seed)
        phi_q = rng.uniform(0.0, 2.0 * np.pi)
        p = np.where(mask, amplitude * np.sin(2.0 * np.pi * lines / period + phi0), 0.0)
        q = np.where(mask, amplitude * np.sin(2.0 * np.pi * lines / period + phi_q), 0.0)
    return MotionTrajectory(p=p, q=q, kind=kind, amplitude=amplitude, period=period,
                            phi0=phi0, fraction=fraction, seed=seed)


def phase_modulate(kgrid: np.ndarray, traj: MotionTrajectory) -> np.ndarray:
    """Apply the per-line phase error to a k-space grid (magnitude-preserving)."""
    h, w = kgrid.shape
    if len(traj.p) != h:
        raise ValueError(f"trajectory length {len(traj.p)} != {h} phase-encode lines")
    kx = np.fft.fftfreq(w)  # centered integer index / W
    ky = np.fft.fftfreq(h)
    phase = 2.0 * np.pi * (kx[None, :] * traj.p[:, None] + ky[:, None] * traj.q[:, None])
    return np.exp(-1j * phase) * kgrid


def corrupt_kspace(clean: np.ndarray, traj: MotionTrajectory) -> np.ndarray:
    """Corrupt a real [0,1] image through the k-space phase-error model."""
    clean = np.asarray(clean, dtype=np.float64)
    kgrid = fft2(clean.astype(np.complex128))
    corrupted = ifft2(phase_modulate(kgrid, traj))
    return np.clip(corrupted.real, 0.0, 1.0)


def compose_artifact(clean: np.ndarray, artifact: np.ndarray, coupling: float) -> np.ndarray:
    """I = J + R - coupling*(J*R), the nonlinear composition of content and artifact."""
    clean = np.asarray(clean, dtype=np.float64)
    artifact = np.asarray(artifact, dtype=np.float64)
    if clean.shape != artifact.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {artifact.shape}")
    return clean + artifact - coupling * (clean * artifact)


def decompose_artifact(corrupted: np.ndarray, clean: np.ndarray, coupling: float) -> np.ndarray:
    """Recover R from I and J: R = (I - J) / (1 - coupling*J)."""
    corrupted = np.asarray(corrupted, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if corrupted.shape != clean.shape:
        raise ValueError(f"shape mismatch: {corrupted.shape} vs {clean.shape}")
    denom = 1.0 - coupling * clean
    bad = np.abs(denom) <= 1e-6
    if np.any(bad):
        raise ValueError(f"decompose: denominator within 1e-6 of zero at {int(bad.sum())} pixels")
    return (corrupted - clean) / denom
