"""Conditioning encoder: multi-level features from the corrupted image.

A small residual trunk at input resolution, then one feature head per level
with stride-2 average pooling between levels. Level l output is
features x H/2^l x W/2^l; no layer ever increases resolution.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, avg_pool2, leaky_relu
from .nn import Conv2d


class ArtifactEncoder:
    def __init__(self, levels: int, features: int = 16, blocks: int = 4,
                 rng: np.random.Generator | None = None, in_channels: int = 1):
        if levels < 1 or features < 1 or blocks < 0:
            raise ValueError("levels and features must be >= 1, blocks >= 0")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.levels = levels
        self.features = features
        self.head = Conv2d(in_channels, features, 3, rng)
        self.blocks = [(Conv2d(features, features, 3, rng), Conv2d(features, features, 3, rng))
                       for _ in range(blocks)]
        self.level_heads = [Conv2d(features, features, 3, rng) for _ in range(levels)]

    def __call__(self, x: Tensor) -> list[Tensor]:
        n, c, h, w = x.shape
        divisor = 2 ** self.levels
        if h % divisor or w % divisor:
            raise ValueError(f"input {h}x{w} not divisible by 2^{self.levels}")

        trunk = leaky_relu(self.head(x))
        for conv1, conv2 in self.blocks:
            trunk = trunk + conv2(leaky_relu(conv1(trunk)))

        feats = []
        current = trunk
        for level, head in enumerate(self.level_heads):
            if level > 0:
                current = avg_pool2(current)
            feats.append(head(current))
        return feats

    def named_params(self, prefix: str = "ace") -> dict[str, Tensor]:
        params = dict(self.head.named_params(f"{prefix}.head"))
        for i, (conv1, conv2) in enumerate(self.blocks):
            params.update(conv1.named_params(f"{prefix}.block{i}.conv1"))
            params.update(conv2.named_params(f"{prefix}.block{i}.conv2"))
        for i, head in enumerate(self.level_heads):
            params.update(head.named_params(f"{prefix}.level{i}"))
        return params
