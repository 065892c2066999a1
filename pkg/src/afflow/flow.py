"""Invertible multi-scale flow between clean images and latent codes,
conditioned on encoder features, with exact log-determinant accounting.

Each level: squeeze -> K x (actnorm -> invertible 1x1 conv -> nonlinear
artifact coupling) -> channelwise split (all but the last level). The
coupling layer mirrors the artifact composition model: the transformed half
is y_b = m(x_a, cond) + x_b - lam*(x_b (*) g(x_a, cond)) with the
multiplicative interaction routed through a bounded gate
g in (eps_inv, 1 - eps_inv), which keeps 1 - lam*g away from zero and makes
the layer an exact bijection with a triangular Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 3
    steps: int = 12
    lambda0: float = 0.2
    decay_a: float = 1.0
    hidden: int = 64
    eps_inv: float = 0.05

    def __post_init__(self):
        if self.levels < 1 or self.steps < 1:
            raise ValueError("levels and steps must be >= 1")
        if not 0.0 < self.decay_a <= 1.0:
            raise ValueError(f"decay factor must be in (0, 1], got {self.decay_a}")
        if self.lambda0 < 0.0:
            raise ValueError(f"lambda0 must be >= 0, got {self.lambda0}")
        if self.hidden < 1:
            raise ValueError("hidden channels must be >= 1")
        if not 0.0 < self.eps_inv < 0.5:
            raise ValueError(f"eps_inv must be in (0, 0.5), got {self.eps_inv}")
        # gate g < 1 - eps_inv, so 1 - lam*g stays positive iff lam*(1-eps_inv) < 1
        if self.lambda0 * (1.0 - self.eps_inv) >= 1.0:
            raise ValueError(
                f"lambda0={self.lambda0} breaks invertibility for eps_inv={self.eps_inv}: "
                f"need lambda0 < {1.0 / (1.0 - self.eps_inv):.4f}")

    def lambda_at(self, global_step: int) -> float:
        """Coupling coefficient of flow step k counted across all levels."""
        return self.lambda0 * self.decay_a ** global_step


# ---------------------------------------------------------------------------
# volume-preserving rearrangements


def squeeze2(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,4C,H/2,W/2); 2x2 block order TL, TR, BL, BR."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"squeeze needs even extents, got {h}x{w}")
    r = ad.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    t = ad.transpose(r, (0, 3, 5, 1, 2, 4))
    return ad.reshape(t, (n, 4 * c, h // 2, w // 2))


def unsqueeze2(x: Tensor) -> Tensor:
    """Inverse of squeeze2."""
    n, c4, h2, w2 = x.shape
    if c4 % 4:
        raise ValueError(f"unsqueeze needs channels divisible by 4, got {c4}")
    c = c4 // 4
    r = ad.reshape(x, (n, 2, 2, c, h2, w2))
    t = ad.transpose(r, (0, 3, 4, 1, 5, 2))
    return ad.reshape(t, (n, c, 2 * h2, 2 * w2))


def gaussian_logp(z: Tensor, mean: Tensor, log_sigma: Tensor) -> Tensor:
    """Per-sample diagonal-Gaussian log-density, summed over C,H,W."""
    diff = (z - mean) * ad.exp(-log_sigma)
    per_entry = log_sigma + 0.5 * LOG_2PI + 0.5 * (diff * diff)
    return -ad.reduce_sum(per_entry, axes=(1, 2, 3))


def std_normal_logp(z: Tensor) -> Tensor:
    n_dims = int(np.prod(z.shape[1:]))
    return -(0.5 * LOG_2PI * n_dims) - 0.5 * ad.reduce_sum(z * z, axes=(1, 2, 3))


# ---------------------------------------------------------------------------
# flow layers


class ActNorm:
    """Per-channel affine y = s*(x + b) with data-dependent initialization."""

    def __init__(self, channels: int):
        self.channels = channels
        self.s = Tensor(np.ones(channels), requires_grad=True)
        self.b = Tensor(np.zeros(channels), requires_grad=True)
        self.initialized = False

    def _init_from(self, x: np.ndarray):
        mean = x.mean(axis=(0, 2, 3))
        std = np.maximum(x.std(axis=(0, 2, 3)), 1e-8)
        self.b.data = -mean
        self.s.data = 1.0 / std
        self.initialized = True

    def forward(self, x: Tensor, update_init: bool = False) -> tuple[Tensor, Tensor]:
        if update_init and not self.initialized:
            self._init_from(x.data)
        if np.any(self.s.data == 0.0):
            raise ValueError("actnorm: zero scale")
        n, c, h, w = x.shape
        shape = (1, c, 1, 1)
        y = (x + ad.reshape(self.b, shape)) * ad.reshape(self.s, shape)
        logdet = float(h * w) * ad.reduce_sum(ad.log(ad.absolute(self.s)))
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        c = self.channels
        shape = (1, c, 1, 1)
        return y / ad.reshape(self.s, shape) - ad.reshape(self.b, shape)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.s": self.s, f"{prefix}.b": self.b}


class InvConv1x1:
    """Per-pixel channel mix by a square matrix, initialized to a random rotation."""

    def __init__(self, channels: int, rng: np.random.Generator):
        gauss = rng.normal(size=(channels, channels))
        q, r = np.linalg.qr(gauss)
        q *= np.sign(np.diag(r))  # fix QR sign ambiguity
        self.channels = channels
        self.w = Tensor(q, requires_grad=True)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, w = x.shape
        kernel = ad.reshape(self.w, (c, c, 1, 1))
        y = ad.conv2d(x, kernel, Tensor(np.zeros(c)))
        logdet = float(h * w) * ad.logabsdet(self.w)
        return y, logdet

    def inverse(self, y: Tensor) -> Tensor:
        c = self.channels
        w_inv = np.linalg.inv(self.w.data)  # LU-based solve
        return ad.conv2d(y, Tensor(w_inv.reshape(c, c, 1, 1)), Tensor(np.zeros(c)))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w}


class NacCoupling:
    """Nonlinear artifact coupling.

    Forward: y_a = x_a; y_b = m + x_b*(1 - lam*g), where (m, t) are the two
    heads of one conv subnet of concat(x_a, cond) and g is sigmoid(t)
    squashed into (eps_inv, 1 - eps_inv). log-det = sum log(1 - lam*g).
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int,
                 lam: float, eps_inv: float, rng: np.random.Generator):
        if channels % 2:
            raise ValueError(f"coupling needs even channels, got {channels}")
        self.half = channels // 2
        self.lam = lam
        self.eps_inv = eps_inv
        self.conv1 = Conv2d(self.half + cond_channels, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, hidden, 1, rng)
        self.conv3 = Conv2d(hidden, channels, 3, rng, zero_init=True)

    def _heads(self, xa: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        h = ad.concat([xa, cond], axis=1)
        h = ad.leaky_relu(self.conv1(h))
        h = ad.leaky_relu(self.conv2(h))
        out = self.conv3(h)
        m = ad.narrow(out, 1, 0, self.half)
        t = ad.narrow(out, 1, self.half, self.half)
        gate = self.eps_inv + (1.0 - 2.0 * self.eps_inv) * ad.sigmoid(t)
        return m, gate

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        xa = ad.narrow(x, 1, 0, self.half)
        xb = ad.narrow(x, 1, self.half, self.half)
        m, gate = self._heads(xa, cond)
        scale = 1.0 - self.lam * gate
        yb = m + xb * scale
        logdet = ad.reduce_sum(ad.log(scale), axes=(1, 2, 3))
        return ad.concat([xa, yb], axis=1), logdet

    def inverse(self, y: Tensor, cond: Tensor) -> Tensor:
        ya = ad.narrow(y, 1, 0, self.half)
        yb = ad.narrow(y, 1, self.half, self.half)
        m, gate = self._heads(ya, cond)
        xb = (yb - m) / (1.0 - self.lam * gate)
        return ad.concat([ya, xb], axis=1)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        params.update(self.conv1.named_params(f"{prefix}.conv1"))
        params.update(self.conv2.named_params(f"{prefix}.conv2"))
        params.update(self.conv3.named_params(f"{prefix}.conv3"))
        return params


class Split:
    """Factor out half the channels, scored under a conditional Gaussian prior.

    The prior head is a zero-initialized 1x1 conv of the kept half, so the
    prior starts as N(0, I).
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        if channels % 2:
            raise ValueError(f"split needs even channels, got {channels}")
        self.half = channels // 2
        self.prior = Conv2d(self.half, channels, 1, rng, zero_init=True)

    def _prior_stats(self, kept: Tensor) -> tuple[Tensor, Tensor]:
        stats = self.prior(kept)
        mean = ad.narrow(stats, 1, 0, self.half)
        log_sigma = ad.narrow(stats, 1, self.half, self.half)
        return mean, log_sigma

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        kept = ad.narrow(x, 1, 0, self.half)
        z_out = ad.narrow(x, 1, self.half, self.half)
        mean, log_sigma = self._prior_stats(kept)
        return kept, z_out, gaussian_logp(z_out, mean, log_sigma)

    def inverse(self, kept: Tensor, z_out: Tensor | None, tau: float,
                rng: np.random.Generator | None) -> Tensor:
        if z_out is None:
            mean, log_sigma = self._prior_stats(kept)
            z_data = mean.data
            if tau != 0.0:
                if rng is None:
                    raise ValueError("sampling with tau != 0 requires an RNG")
                noise = rng.standard_normal(mean.shape)
                z_data = z_data + np.exp(log_sigma.data) * (tau * noise)
            z_out = Tensor(z_data)
        return ad.concat([kept, z_out], axis=1)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return self.prior.named_params(f"{prefix}.prior")


class FlowStep:
    def __init__(self, channels: int, cond_channels: int, hidden: int,
                 lam: float, eps_inv: float, rng: np.random.Generator):
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv1x1(channels, rng)
        self.coupling = NacCoupling(channels, cond_channels, hidden, lam, eps_inv, rng)

    def forward(self, x: Tensor, cond: Tensor, update_init: bool) -> tuple[Tensor, Tensor]:
        x, ld_act = self.actnorm.forward(x, update_init)
        x, ld_conv = self.invconv.forward(x)
        x, ld_coup = self.coupling.forward(x, cond)
        return x, ld_act + ld_conv + ld_coup

    def inverse(self, y: Tensor, cond: Tensor) -> Tensor:
        y = self.coupling.inverse(y, cond)
        y = self.invconv.inverse(y)
        return self.actnorm.inverse(y)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        params.update(self.actnorm.named_params(f"{prefix}.actnorm"))
        params.update(self.invconv.named_params(f"{prefix}.invconv"))
        params.update(self.coupling.named_params(f"{prefix}.coupling"))
        return params


class RafFlow:
    """L-level flow; returns latent parts in fixed order (splits, then final)."""

    def __init__(self, config: FlowConfig, cond_channels: int,
                 rng: np.random.Generator, in_channels: int = 1):
        self.config = config
        self.in_channels = in_channels
        self.cond_channels = cond_channels
        # conditioning enters each level through a lossless space-to-channel
        # squeeze, so the subnets see 4x the per-level feature channels
        squeezed_cond = 4 * cond_channels
        self.levels = []
        channels = in_channels
        global_step = 0
        for level in range(config.levels):
            channels *= 4
            steps = []
            for _ in range(config.steps):
                lam = config.lambda_at(global_step)
                global_step += 1
                steps.append(FlowStep(channels, squeezed_cond, config.hidden,
                                      lam, config.eps_inv, rng))
            split = Split(channels, rng) if level < config.levels - 1 else None
            self.levels.append((steps, split))
            if split is not None:
                channels //= 2
        self.final_channels = channels
        # conditional prior over the final latent; zero-init starts it at N(0, I)
        self.final_prior = Conv2d(squeezed_cond, 2 * channels, 1, rng, zero_init=True)

    def _final_prior_stats(self, cond_deep: Tensor) -> tuple[Tensor, Tensor]:
        stats = self.final_prior(cond_deep)
        mean = ad.narrow(stats, 1, 0, self.final_channels)
        log_sigma = ad.narrow(stats, 1, self.final_channels, self.final_channels)
        return mean, log_sigma

    def _check_input(self, h: int, w: int):
        divisor = 2 ** self.config.levels
        if h % divisor or w % divisor:
            raise ValueError(f"input {h}x{w} not divisible by 2^{self.config.levels}")

    def forward(self, y: Tensor, cond: list[Tensor],
                update_init: bool = False) -> tuple[list[Tensor], Tensor, Tensor]:
        """Map clean images to latent parts; also return per-sample
        (total_logdet, prior_logp)."""
        n, c, h, w = y.shape
        self._check_input(h, w)
        if len(cond) < self.config.levels:
            raise ValueError(f"need {self.config.levels} conditioning levels, got {len(cond)}")

        latents = []
        logdet = Tensor(np.zeros(n))
        logp = Tensor(np.zeros(n))
        current = y
        cond_l = None
        for level, (steps, split) in enumerate(self.levels):
            current = squeeze2(current)
            cond_l = squeeze2(cond[level])  # lossless match of post-squeeze resolution
            for step in steps:
                current, ld = step.forward(current, cond_l, update_init)
                logdet = logdet + ld
            if split is not None:
                current, z_out, lp = split.forward(current)
                latents.append(z_out)
                logp = logp + lp
        latents.append(current)
        mean, log_sigma = self._final_prior_stats(cond_l)
        logp = logp + gaussian_logp(current, mean, log_sigma)
        return latents, logdet, logp

    def inverse(self, latents: list[Tensor] | None, cond: list[Tensor],
                tau: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
        """Exact inverse given recorded latents; with latents=None, draw every
        latent from its prior as mean + sigma*tau*noise (tau=0: prior means)."""
        n, _, h0, w0 = cond[0].shape
        self._check_input(h0, w0)
        hf, wf = h0 // 2 ** self.config.levels, w0 // 2 ** self.config.levels

        if latents is None:
            cond_deep = squeeze2(cond[self.config.levels - 1])
            mean, log_sigma = self._final_prior_stats(cond_deep)
            z_data = mean.data
            if tau != 0.0:
                if rng is None:
                    raise ValueError("sampling with tau != 0 requires an RNG")
                z_data = z_data + np.exp(log_sigma.data) * (tau * rng.standard_normal(z_data.shape))
            current = Tensor(z_data)
        else:
            if len(latents) != len(self.levels):
                raise ValueError(f"expected {len(self.levels)} latent parts, got {len(latents)}")
            current = latents[-1]
            expected = (n, self.final_channels, hf, wf)
            if current.shape != expected:
                raise ValueError(f"final latent shape {current.shape} != {expected}")

        for level in range(self.config.levels - 1, -1, -1):
            steps, split = self.levels[level]
            if split is not None:
                z_out = latents[level] if latents is not None else None
                current = split.inverse(current, z_out, tau, rng)
            cond_l = squeeze2(cond[level])
            for step in reversed(steps):
                current = step.inverse(current, cond_l)
            current = unsqueeze2(current)
        return current

    def named_params(self, prefix: str = "flow") -> dict[str, Tensor]:
        params = {}
        for lvl, (steps, split) in enumerate(self.levels):
            for idx, step in enumerate(steps):
                params.update(step.named_params(f"{prefix}.level{lvl}.step{idx}"))
            if split is not None:
                params.update(split.named_params(f"{prefix}.level{lvl}.split"))
        params.update(self.final_prior.named_params(f"{prefix}.final_prior"))
        return params

    def actnorm_layers(self, prefix: str = "flow") -> dict[str, ActNorm]:
        layers = {}
        for lvl, (steps, _) in enumerate(self.levels):
            for idx, step in enumerate(steps):
                layers[f"{prefix}.level{lvl}.step{idx}.actnorm"] = step.actnorm
        return layers

    def latent_shapes(self, n: int, h: int, w: int) -> list[tuple[int, ...]]:
        """Latent part shapes, in the order forward() emits them."""
        shapes = []
        channels = self.in_channels
        for level in range(self.config.levels):
            channels *= 4
            h, w = h // 2, w // 2
            if level < self.config.levels - 1:
                channels //= 2
                shapes.append((n, channels, h, w))
        shapes.append((n, self.final_channels, h, w))
        return shapes


def flatten_latents(latents: list[Tensor]) -> np.ndarray:
    """Concatenate latent parts into one flat vector per batch, fixed order."""
    return np.concatenate([z.data.reshape(z.shape[0], -1) for z in latents], axis=1)
