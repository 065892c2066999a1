"""Parameterized building blocks shared by the encoder and the flow subnets."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, conv2d


class Conv2d:
    """Same-padded conv holding its weight (OIkk) and bias (O) parameters."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((cout, cin, kernel, kernel))
        else:
            fan_in = cin * kernel * kernel
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(cout, cin, kernel, kernel))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}
