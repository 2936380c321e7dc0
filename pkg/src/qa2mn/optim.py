"""Adam optimizer and global-norm gradient clipping."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor


def clip_gradients(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the applied scale factor (1.0 when no clipping happened).
    Parameters without a gradient buffer are ignored.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total <= max_norm or total == 0.0:
        return 1.0
    scale = max_norm / total
    for g in grads:
        g *= scale
    return scale


class Adam:
    """Adam with bias correction over an ordered name->Tensor parameter map.

    Parameters whose .grad is None at step time are skipped entirely, so
    alternating objectives that touch disjoint parameter subsets do not
    perturb the untouched ones.
    """

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
