"""AdamW over autodiff parameter leaves.

Decoupled weight decay folds into the proposed step, and an optional
per-parameter transform is applied to that full step before the
parameter moves. The gating constraints hook in there: projecting the
final delta (moments and decay included) is what actually guarantees the
update never touches the protected subspace, since Adam steps are not
parallel to raw gradients.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .autodiff import DiffNode

DeltaTransform = Callable[[np.ndarray], np.ndarray]


class AdamW:
    def __init__(
        self,
        params: list[DiffNode],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(
        self, transforms: Optional[dict[DiffNode, DeltaTransform]] = None
    ) -> None:
        """Apply one update from the gradients currently on the params.

        transforms maps a param node to a callable reshaping that param's
        proposed delta (projection constraints plug in here). Gradients
        are consumed: they are cleared after the step.
        """
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            delta = -self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value
            )
            if transforms and p in transforms:
                delta = transforms[p](delta)
            p.value = p.value + delta
            p.grad = None
