"""Reference-based image quality metrics: PSNR, SSIM, UQI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(result: np.ndarray, reference: np.ndarray) -> float:
    """20*log10(max(ref)*sqrt(N) / ||ref - result||), capped at 100 dB."""
    result = np.asarray(result, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if result.shape != reference.shape:
        raise ValueError(f"shape mismatch: {result.shape} vs {reference.shape}")
    err = np.linalg.norm((reference - result).ravel())
    if err == 0.0:
        return PSNR_CAP_DB
    peak = float(np.max(reference))
    value = 20.0 * np.log10(peak * np.sqrt(result.size) / err)
    return float(min(value, PSNR_CAP_DB))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g1, g1)
    return window / window.sum()


def _window_moments(a: np.ndarray, b: np.ndarray, window: np.ndarray):
    """Gaussian-weighted window means, variances and covariance ('valid' windows)."""
    size = window.shape[0]
    if a.shape[0] < size or a.shape[1] < size:
        raise ValueError(f"image {a.shape} smaller than {size}x{size} window")
    wa = np.lib.stride_tricks.sliding_window_view(a, (size, size))
    wb = np.lib.stride_tricks.sliding_window_view(b, (size, size))
    mu_a = np.tensordot(wa, window, axes=((2, 3), (0, 1)))
    mu_b = np.tensordot(wb, window, axes=((2, 3), (0, 1)))
    var_a = np.tensordot(wa * wa, window, axes=((2, 3), (0, 1))) - mu_a ** 2
    var_b = np.tensordot(wb * wb, window, axes=((2, 3), (0, 1))) - mu_b ** 2
    cov = np.tensordot(wa * wb, window, axes=((2, 3), (0, 1))) - mu_a * mu_b
    return mu_a, mu_b, np.maximum(var_a, 0.0), np.maximum(var_b, 0.0), cov


def _as_single_channel(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    return img


def ssim(result: np.ndarray, reference: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         dynamic_range: float = 1.0) -> float:
    """Windowed SSIM, 11x11 Gaussian window with sigma 1.5."""
    a = _as_single_channel(result)
    b = _as_single_channel(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mu_a, mu_b, var_a, var_b, cov = _window_moments(a, b, gaussian_window())
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def uqi(result: np.ndarray, reference: np.ndarray) -> float:
    """SSIM with zero stabilizers; windows with zero denominator are skipped."""
    a = _as_single_channel(result)
    b = _as_single_channel(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mu_a, mu_b, var_a, var_b, cov = _window_moments(a, b, gaussian_window())
    den = (mu_a ** 2 + mu_b ** 2) * (var_a + var_b)
    valid = den > 0.0
    if not np.any(valid):
        raise ValueError("uqi undefined: every window has zero denominator")
    num = (2.0 * mu_a * mu_b) * (2.0 * cov)
    return float(np.mean(num[valid] / den[valid]))


@dataclass
class MetricReport:
    ids: list[str]
    psnr_values: list[float]
    ssim_values: list[float]
    uqi_values: list[float]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def mean_uqi(self) -> float:
        return float(np.mean(self.uqi_values))

    def __len__(self):
        return len(self.ids)

    def to_csv(self) -> str:
        lines = ["id,psnr,ssim,uqi"]
        for i, pid in enumerate(self.ids):
            lines.append(f"{pid},{float(self.psnr_values[i])!r},"
                         f"{float(self.ssim_values[i])!r},{float(self.uqi_values[i])!r}")
        lines.append(f"mean,{self.mean_psnr!r},{self.mean_ssim!r},{self.mean_uqi!r}")
        return "\n".join(lines) + "\n"


def evaluate_pairs(ids: list[str], results: np.ndarray, references: np.ndarray) -> MetricReport:
    """Score NxCxHxW result images against references, one row per id."""
    report = MetricReport(ids=list(ids), psnr_values=[], ssim_values=[], uqi_values=[])
    for res, ref in zip(results, references):
        report.psnr_values.append(psnr(res, ref))
        report.ssim_values.append(ssim(res, ref))
        report.uqi_values.append(uqi(res, ref))
    return report
