"""SGD with momentum, Adam, and the poly learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .diffcore import Tensor


def poly_lr(base: float, t: int, total: int, power: float = 0.9) -> float:
    """Poly decay from ``base`` at t=0 to ``base / 100`` at t=total."""
    min_lr = base / 100.0
    if total <= 0 or t >= total:
        return min_lr
    frac = 1.0 - max(t, 0) / total
    return min_lr + (base - min_lr) * frac ** power


class SGD:
    """Momentum SGD with L2 weight decay added to the gradient."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        lr = np.float32(self.lr)
        mom = np.float32(self.momentum)
        wd = np.float32(self.weight_decay)
        for name, p in self.params.items():
            if p.grad is None:
                continue
            d = p.grad + wd * p.data if self.weight_decay else p.grad
            buf = self.buffers.get(name)
            buf = d.copy() if buf is None else mom * buf + d
            self.buffers[name] = buf
            p.data = (p.data - lr * buf).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {f"{name}/momentum": buf for name, buf in self.buffers.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.buffers = {k[: -len("/momentum")]: v.copy() for k, v in tensors.items() if k.endswith("/momentum")}


class Adam:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.99),
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = np.float32(b1) * m + np.float32(1 - b1) * g
            v = np.float32(b2) * v + np.float32(1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            step = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(self.eps))
            p.data = (p.data - np.float32(self.lr) * step).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"{n}/m": a for n, a in self.m.items()}
        out.update({f"{n}/v": a for n, a in self.v.items()})
        out["__steps__"] = np.array([self.steps], dtype=np.int64)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.m = {k[:-2]: v.copy() for k, v in tensors.items() if k.endswith("/m")}
        self.v = {k[:-2]: v.copy() for k, v in tensors.items() if k.endswith("/v")}
        self.steps = int(tensors["__steps__"][0]) if "__steps__" in tensors else 0
