"""Built-in property suite: invertibility, log-determinants, gradients,
Fourier physics, composition algebra, metric identities."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flow import ActNorm, FlowConfig, InvConv1x1, NacCoupling, RafFlow, Split, \
    flatten_latents, squeeze2, unsqueeze2
from .kspace import compose_artifact, corrupt_kspace, decompose_artifact, fft2, \
    ifft2, make_trajectory, phase_modulate
from .metrics import psnr, ssim, uqi
from .phantom import shepp_logan


def finite_diff_grads(build_loss, tensors, step: float = 1e-5):
    """Central-difference gradients of a scalar-builder w.r.t. each tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = build_loss().item()
            flat[i] = orig - step
            lo = build_loss().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.abs(analytic) + np.abs(numeric) + 1e-8
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_jacobian(fn, x0: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Dense Jacobian of a flat-vector map by central differences."""
    n = x0.size
    first = fn(x0)
    jac = np.zeros((first.size, n))
    for j in range(n):
        xp = x0.copy()
        xp[j] += step
        xm = x0.copy()
        xm[j] -= step
        jac[:, j] = (fn(xp) - fn(xm)) / (2.0 * step)
    return jac


def _random_step_params(channels: int, cond_channels: int, rng) -> tuple:
    """A flow step with non-trivial, well-conditioned random parameters."""
    actnorm = ActNorm(channels)
    actnorm.s.data = rng.uniform(0.5, 2.0, channels)
    actnorm.b.data = rng.normal(0.0, 0.3, channels)
    actnorm.initialized = True
    invconv = InvConv1x1(channels, rng)
    coupling = NacCoupling(channels, cond_channels, 8, lam=0.4, eps_inv=0.05, rng=rng)
    coupling.conv3.w.data = rng.normal(0.0, 0.3, coupling.conv3.w.shape)
    coupling.conv3.b.data = rng.normal(0.0, 0.3, coupling.conv3.b.shape)
    return actnorm, invconv, coupling


def _randomized_flow(config: FlowConfig, cond_channels: int, rng) -> RafFlow:
    flow = RafFlow(config, cond_channels, rng)
    for steps, split in flow.levels:
        for step in steps:
            step.actnorm.s.data = rng.uniform(0.5, 2.0, step.actnorm.channels)
            step.actnorm.b.data = rng.normal(0.0, 0.3, step.actnorm.channels)
            step.actnorm.initialized = True
            step.coupling.conv3.w.data = rng.normal(0.0, 0.2, step.coupling.conv3.w.shape)
        if split is not None:
            split.prior.w.data = rng.normal(0.0, 0.1, split.prior.w.shape)
    return flow


# ---------------------------------------------------------------------------
# check groups; each returns a list of (name, passed, detail)


def check_invertibility(trials: int = 100, tol: float = 1e-8,
                        full_tol: float = 1e-6) -> list:
    rng = np.random.default_rng(7)
    worst = {"actnorm": 0.0, "invconv": 0.0, "coupling": 0.0,
             "squeeze": 0.0, "split": 0.0, "full": 0.0}
    for _ in range(trials):
        actnorm, invconv, coupling = _random_step_params(4, 3, rng)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        cond = Tensor(rng.normal(size=(1, 3, 4, 4)))

        y, _ = actnorm.forward(x)
        worst["actnorm"] = max(worst["actnorm"], float(np.max(np.abs(actnorm.inverse(y).data - x.data))))
        y, _ = invconv.forward(x)
        worst["invconv"] = max(worst["invconv"], float(np.max(np.abs(invconv.inverse(y).data - x.data))))
        y, _ = coupling.forward(x, cond)
        worst["coupling"] = max(worst["coupling"], float(np.max(np.abs(coupling.inverse(y, cond).data - x.data))))
        worst["squeeze"] = max(worst["squeeze"], float(np.max(np.abs(unsqueeze2(squeeze2(x)).data - x.data))))

        split = Split(4, rng)
        split.prior.w.data = rng.normal(0.0, 0.1, split.prior.w.shape)
        kept, z_out, _ = split.forward(x)
        roundtrip = split.inverse(kept, z_out, 0.0, None)
        worst["split"] = max(worst["split"], float(np.max(np.abs(roundtrip.data - x.data))))

        flow = _randomized_flow(FlowConfig(levels=2, steps=3, lambda0=0.3, hidden=8), 3, rng)
        img = Tensor(rng.normal(size=(1, 1, 16, 16)))
        cond_levels = [Tensor(rng.normal(size=(1, 3, 16, 16))),
                       Tensor(rng.normal(size=(1, 3, 8, 8)))]
        latents, _, _ = flow.forward(img, cond_levels)
        recon = flow.inverse(latents, cond_levels)
        worst["full"] = max(worst["full"], float(np.max(np.abs(recon.data - img.data))))

    results = []
    for name in ("actnorm", "invconv", "coupling", "squeeze", "split"):
        results.append((f"invertibility/{name}", worst[name] < tol,
                        f"max err {worst[name]:.2e} (tol {tol:.0e})"))
    results.append(("invertibility/full_L2_K3", worst["full"] < full_tol,
                    f"max err {worst['full']:.2e} (tol {full_tol:.0e})"))
    return results


def check_logdet(tol: float = 1e-5) -> list:
    rng = np.random.default_rng(11)
    results = []

    def layer_map(layer, cond=None):
        def fn(flat):
            x = Tensor(flat.reshape(1, 4, 2, 2))
            y, _ = (layer.forward(x) if cond is None else layer.forward(x, cond))
            return y.data.ravel().copy()
        return fn

    actnorm, invconv, coupling = _random_step_params(4, 2, rng)
    cond = Tensor(rng.normal(size=(1, 2, 2, 2)))
    x0 = rng.normal(size=16)

    for name, layer, c in (("actnorm", actnorm, None), ("invconv1x1", invconv, None),
                           ("coupling", coupling, cond)):
        x = Tensor(x0.reshape(1, 4, 2, 2))
        _, ld = (layer.forward(x) if c is None else layer.forward(x, c))
        analytic = float(np.sum(ld.data))
        jac = numeric_jacobian(layer_map(layer, c), x0)
        _, numeric = np.linalg.slogdet(jac)
        err = abs(analytic - numeric)
        results.append((f"logdet/{name}", err < tol, f"err {err:.2e} (tol {tol:.0e})"))

    flow = _randomized_flow(FlowConfig(levels=1, steps=2, lambda0=0.3, hidden=8), 2, rng)
    cond_full = Tensor(rng.normal(size=(1, 2, 8, 8)))
    y0 = rng.normal(size=64)

    def full_map(flat):
        latents, _, _ = flow.forward(Tensor(flat.reshape(1, 1, 8, 8)), [cond_full])
        return flatten_latents(latents).ravel().copy()

    latents, logdet, _ = flow.forward(Tensor(y0.reshape(1, 1, 8, 8)), [cond_full])
    _, numeric = np.linalg.slogdet(numeric_jacobian(full_map, y0))
    err = abs(float(logdet.data[0]) - numeric)
    results.append(("logdet/full_L1_K2", err < tol, f"err {err:.2e} (tol {tol:.0e})"))
    return results


def check_gradients(tol: float = 1e-4) -> list:
    rng = np.random.default_rng(13)
    results = []

    def check(name, build_loss, tensors):
        loss = build_loss()
        for t in tensors:
            t.grad = None
        loss.backward()
        numeric = finite_diff_grads(build_loss, tensors)
        err = max(max_rel_error(t.grad, g) for t, g in zip(tensors, numeric))
        results.append((f"gradient/{name}", err < tol, f"max rel err {err:.2e}"))

    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    bc = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    proj = Tensor(rng.normal(size=(2, 3)))
    check("add_broadcast", lambda: ad.reduce_sum((a + bc) * proj), [a, bc])
    check("mul", lambda: ad.reduce_sum(a * b * proj), [a, b])
    check("div", lambda: ad.reduce_sum((a / (b + 5.0)) * proj), [a, b])
    check("sub_mean", lambda: ad.reduce_mean(a - b), [a, b])

    pos = Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True)
    check("log", lambda: ad.reduce_sum(ad.log(pos) * proj), [pos])
    check("exp", lambda: ad.reduce_sum(ad.exp(a) * proj), [a])
    check("sigmoid", lambda: ad.reduce_sum(ad.sigmoid(a) * proj), [a])
    check("leaky_relu", lambda: ad.reduce_sum(ad.leaky_relu(a) * proj), [a])
    check("abs", lambda: ad.reduce_sum(ad.absolute(a) * proj), [a])

    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    bias = Tensor(rng.normal(size=3), requires_grad=True)
    proj_c = Tensor(rng.normal(size=(1, 3, 4, 4)))
    check("conv2d", lambda: ad.reduce_sum(ad.conv2d(x, w, bias) * proj_c), [x, w, bias])

    proj_p = Tensor(rng.normal(size=(1, 2, 2, 2)))
    check("avg_pool2", lambda: ad.reduce_sum(ad.avg_pool2(x) * proj_p), [x])

    mat = Tensor(np.linalg.qr(rng.normal(size=(3, 3)))[0] * 1.3, requires_grad=True)
    check("logabsdet", lambda: ad.logabsdet(mat), [mat])

    big = Tensor(rng.normal(size=(2, 4, 2, 2)), requires_grad=True)
    proj_n = Tensor(rng.normal(size=(2, 2, 2, 2)))
    check("narrow_concat", lambda: ad.reduce_sum(
        ad.concat([ad.narrow(big, 1, 0, 1), ad.narrow(big, 1, 2, 1)], 1) * proj_n), [big])
    return results


def check_fourier() -> list:
    rng = np.random.default_rng(17)
    results = []

    g = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    parseval = abs(np.linalg.norm(fft2(g)) - np.linalg.norm(g))
    results.append(("fourier/parseval", parseval < 1e-10, f"err {parseval:.2e}"))

    idx = np.arange(16)
    naive = np.zeros((16, 16), dtype=complex)
    for u in range(16):
        for v in range(16):
            kernel = np.exp(-2j * np.pi * (u * idx[:, None] + v * idx[None, :]) / 16.0)
            naive[u, v] = np.sum(g * kernel)
    naive /= 16.0  # unitary normalization sqrt(16*16)
    dft_err = float(np.max(np.abs(fft2(g) - naive)))
    results.append(("fourier/naive_dft_16x16", dft_err < 1e-9, f"err {dft_err:.2e}"))

    img = shepp_logan(64)
    traj = make_trajectory("rigid-constant", 3.0, 16.0, 0.0, 1.0, 0, 64)
    shifted = corrupt_kspace(img, traj)
    shift_err = float(np.max(np.abs(shifted - np.roll(img, 3, axis=1))))
    results.append(("fourier/shift_theorem", shift_err < 1e-8, f"err {shift_err:.2e}"))

    traj_s = make_trajectory("sinusoidal-respiratory", 1.5, 16.0, 0.3, 0.7, 5, 64)
    kgrid = fft2(img.astype(complex))
    modulated = phase_modulate(kgrid, traj_s)
    mag_err = float(np.max(np.abs(np.abs(modulated) - np.abs(kgrid))))
    results.append(("fourier/magnitude_preserved", mag_err < 1e-12, f"err {mag_err:.2e}"))

    rt = float(np.max(np.abs(ifft2(fft2(g)) - g)))
    results.append(("fourier/roundtrip", rt < 1e-10, f"err {rt:.2e}"))
    return results


def check_composition() -> list:
    rng = np.random.default_rng(19)
    j = rng.uniform(0.0, 0.999, (32, 32))
    r = rng.uniform(-0.2, 0.2, (32, 32))
    composed = compose_artifact(j, r, 0.5)
    err1 = float(np.max(np.abs(decompose_artifact(composed, j, 0.5) - r)))
    i = rng.uniform(0.0, 1.0, (32, 32))
    err2 = float(np.max(np.abs(compose_artifact(j, decompose_artifact(i, j, 0.5), 0.5) - i)))
    additive = float(np.max(np.abs(compose_artifact(j, r, 0.0) - (j + r))))
    return [
        ("composition/roundtrip", max(err1, err2) < 1e-10, f"err {max(err1, err2):.2e}"),
        ("composition/lambda0_additive", additive == 0.0, f"err {additive:.2e}"),
    ]


def check_metric_identities() -> list:
    rng = np.random.default_rng(23)
    x = rng.uniform(0.0, 1.0, (32, 32))
    return [
        ("metrics/psnr_self_cap", psnr(x, x) == 100.0, f"psnr(x,x) = {psnr(x, x)}"),
        ("metrics/ssim_self", abs(ssim(x, x) - 1.0) < 1e-12, f"ssim(x,x) = {ssim(x, x)}"),
        ("metrics/uqi_self", abs(uqi(x, x) - 1.0) < 1e-12, f"uqi(x,x) = {uqi(x, x)}"),
    ]


def run_all() -> list:
    results = []
    results.extend(check_invertibility())
    results.extend(check_logdet())
    results.extend(check_gradients())
    results.extend(check_fourier())
    results.extend(check_composition())
    results.extend(check_metric_identities())
    return results
