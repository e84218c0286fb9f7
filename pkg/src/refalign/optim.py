"""Adam optimizer with per-group learning rates."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Tensor


class Adam:
    """Adam with bias correction; beta/epsilon defaults follow common practice."""

    def __init__(
        self,
        groups: list[tuple[list[Tensor], float]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for params, _ in self.groups for p in params]
        self._v = [np.zeros_like(p.data) for params, _ in self.groups for p in params]

    def _flat_params(self):
        for params, lr in self.groups:
            for p in params:
                yield p, lr

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, (p, lr) in enumerate(self._flat_params()):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient in Adam step")
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.float32(lr) * update.astype(np.float32)

    def zero_grad(self) -> None:
        for p, _ in self._flat_params():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.step_count], np.float32)}
        for i, m in enumerate(self._m):
            state[f"m.{i}"] = m.astype(np.float32)
        for i, v in enumerate(self._v):
            state[f"v.{i}"] = v.astype(np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        for i in range(len(self._m)):
            self._m[i] = state[f"m.{i}"].astype(np.float32).reshape(self._m[i].shape)
            self._v[i] = state[f"v.{i}"].astype(np.float32).reshape(self._v[i].shape)
