"""Full restoration model: conditioning encoder + invertible flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ArtifactEncoder
from .flow import FlowConfig, RafFlow

MODEL_META_KEYS = ("ace_features", "ace_blocks", "in_channels", "init_seed")


@dataclass(frozen=True)
class ModelConfig:
    flow: FlowConfig = field(default_factory=FlowConfig)
    ace_features: int = 16
    ace_blocks: int = 4
    in_channels: int = 1
    init_seed: int = 0


class ArtifactFlowModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.encoder = ArtifactEncoder(config.flow.levels, config.ace_features,
                                       config.ace_blocks, rng, config.in_channels)
        # per-level conditioning = encoder features + the corrupted image
        # itself pooled to the level's resolution (direct fidelity path)
        self.flow = RafFlow(config.flow,
                            cond_channels=config.ace_features + config.in_channels,
                            rng=rng, in_channels=config.in_channels)

    def conditioning(self, corrupt: Tensor) -> list[Tensor]:
        feats = self.encoder(corrupt)
        pooled = corrupt
        cond = []
        for level, feat in enumerate(feats):
            if level > 0:
                pooled = ad.avg_pool2(pooled)
            cond.append(ad.concat([feat, pooled], axis=1))
        return cond

    def named_params(self) -> dict[str, Tensor]:
        params = dict(self.encoder.named_params("ace"))
        params.update(self.flow.named_params("flow"))
        return params

    def nll(self, clean: Tensor, corrupt: Tensor, update_init: bool = False) -> Tensor:
        """Mean per-dimension negative log-likelihood of clean given corrupt, in nats."""
        if clean.shape != corrupt.shape:
            raise ValueError(f"pair shape mismatch: {clean.shape} vs {corrupt.shape}")
        cond = self.conditioning(corrupt)
        _, logdet, logp = self.flow.forward(clean, cond, update_init)
        n_dims = int(np.prod(clean.shape[1:]))
        per_sample = (logp + logdet) * (-1.0 / n_dims)
        return per_sample.mean()

    def nll_value(self, clean: np.ndarray, corrupt: np.ndarray) -> float:
        """Evaluation-only NLL over an NxCxHxW batch."""
        with ad.no_grad():
            return self.nll(Tensor(clean), Tensor(corrupt)).item()

    def restore(self, corrupt: np.ndarray, tau: float = 0.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Restore corrupted images (NxCxHxW); tau=0 is the deterministic
        prior-mean output. Result is clamped to [0, 1]."""
        corrupt = np.asarray(corrupt, dtype=np.float64)
        with ad.no_grad():
            cond = self.conditioning(Tensor(corrupt))
            restored = self.flow.inverse(None, cond, tau, rng)
        return np.clip(restored.data, 0.0, 1.0)

    def actnorm_flags(self) -> dict[str, bool]:
        return {name: layer.initialized for name, layer in self.flow.actnorm_layers().items()}

    def set_actnorm_flags(self, flags: dict[str, bool]):
        layers = self.flow.actnorm_layers()
        for name, layer in layers.items():
            layer.initialized = bool(flags.get(name, False))

    def mark_actnorm_initialized(self):
        for layer in self.flow.actnorm_layers().values():
            layer.initialized = True
