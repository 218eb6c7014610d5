"""Adam optimizer over Parameter groups."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class Adam:
    """Adam with per-group learning rates.

    ``groups`` is a list of (parameters, learning_rate) pairs. Frozen
    parameters are skipped entirely, so their values stay bitwise unchanged
    by :meth:`step`.
    """

    def __init__(self, groups: list[tuple[list[Parameter], float]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    @classmethod
    def single(cls, params: list[Parameter], lr: float,
               betas: tuple[float, float] = (0.9, 0.999)) -> "Adam":
        return cls([(params, lr)], betas=betas)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for params, lr in self.groups:
            for p in params:
                if not p.trainable:
                    continue
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.value)
                    self._v[key] = np.zeros_like(p.value)
                g = p.grad
                m = self._m[key]
                v = self._v[key]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
                p.value -= p.value.dtype.type(lr) * update.astype(p.value.dtype)
