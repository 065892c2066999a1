"""Shared test oracles: finite differences, dense Jacobians, reference metrics."""

import numpy as np
import pytest


def fd_gradients(build_loss, tensors, step=1e-5):
    """Central-difference gradients of a scalar builder w.r.t. each tensor."""
    out = []
    for t in tensors:
        grad = np.zeros_like(t.data)
        flat_data = t.data.ravel()
        flat_grad = grad.ravel()
        for i in range(flat_data.size):
            orig = flat_data[i]
            flat_data[i] = orig + step
            hi = float(build_loss().data)
            flat_data[i] = orig - step
            lo = float(build_loss().data)
            flat_data[i] = orig
            flat_grad[i] = (hi - lo) / (2.0 * step)
        out.append(grad)
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8))


def dense_jacobian(fn, x0, step=1e-6):
    """Numerically assembled Jacobian of a flat-vector map."""
    cols = []
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] += step
        xm = x0.copy()
        xm[j] -= step
        cols.append((fn(xp) - fn(xm)) / (2.0 * step))
    return np.stack(cols, axis=1)


def naive_windowed_metric(a, b, k1, k2, skip_zero_denominator=False):
    """Double-loop Gaussian-windowed l*c*s metric (SSIM family reference)."""
    size, sigma = 11, 1.5
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g1, g1)
    win = win / win.sum()

    c1, c2 = k1 ** 2, k2 ** 2
    c3 = c2 / 2.0
    values = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            wa = a[i:i + size, j:j + size]
            wb = b[i:i + size, j:j + size]
            mu_a = np.sum(win * wa)
            mu_b = np.sum(win * wb)
            var_a = max(np.sum(win * (wa - mu_a) ** 2), 0.0)
            var_b = max(np.sum(win * (wb - mu_b) ** 2), 0.0)
            cov = np.sum(win * (wa - mu_a) * (wb - mu_b))
            if skip_zero_denominator:
                if (mu_a ** 2 + mu_b ** 2) * (var_a + var_b) == 0.0:
                    continue
                lum = 2.0 * mu_a * mu_b / (mu_a ** 2 + mu_b ** 2)
                rest = 2.0 * cov / (var_a + var_b)
                values.append(lum * rest)
            else:
                lum = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
                con = (2.0 * np.sqrt(var_a) * np.sqrt(var_b) + c2) / (var_a + var_b + c2)
                stru = (cov + c3) / (np.sqrt(var_a) * np.sqrt(var_b) + c3)
                values.append(lum * con * stru)
    return float(np.mean(values))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
