"""Adaptive gradient descent with decoupled weight decay (AdamW)."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Deterministic AdamW over a fixed list of parameter tensors.

    Decay is decoupled from the adaptive step, applied as p -= lr * wd * p.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.array) for p in self.params]
        self._v = [np.zeros_like(p.array) for p in self.params]

    def step(self, grads: dict[int, np.ndarray]) -> None:
        """Apply one update from a backward() gradient map; missing grads are 0."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p.id)
            if g is None:
                g = np.zeros_like(p.array)
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            new = p.array - self.lr * self.weight_decay * p.array
            new = new - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.assign_(new)


class MonotoneGuard:
    """Bold-driver epoch schedule wrapped around an optimizer.

    Call snapshot() before an epoch and accept(loss) after evaluating it. An
    epoch that raised the loss is rolled back (parameters and moments) and the
    learning rate is halved, so the recorded end-of-epoch curve never
    increases: rejected epochs show up as plateaus.
    """

    def __init__(self, optimizer: AdamW, grow: float = 1.2):
        self.optimizer = optimizer
        self.grow = grow
        self.lr_cap = 2.0 * optimizer.lr
        self.best: float | None = None
        self._saved = None

    def snapshot(self) -> None:
        opt = self.optimizer
        self._saved = (
            [p.array.copy() for p in opt.params],
            [m.copy() for m in opt._m],
            [v.copy() for v in opt._v],
            opt.t,
            opt.lr,
        )

    def accept(self, loss: float) -> bool:
        """Keep the epoch if the loss did not increase; else roll back."""
        if self.best is None or loss <= self.best:
            self.best = loss
            self._saved = None
            self.optimizer.lr = min(self.optimizer.lr * self.grow, self.lr_cap)
            return True
        params, m, v, t, lr = self._saved
        opt = self.optimizer
        for p, arr in zip(opt.params, params):
            p.assign_(arr)
        opt._m = m
        opt._v = v
        opt.t = t
        opt.lr = lr / 2.0
        self._saved = None
        return False
