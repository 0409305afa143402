"""Adam, cosine learning-rate decay and an exponential moving average of weights."""
from __future__ import annotations

import math
from typing import Dict, Iterable, List, Optional

import numpy as np

from .numerics import Tensor


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.5, 0.9), eps: float = 1e-8):
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = p.data - update.astype(p.dtype, copy=False)

    def state_dict(self) -> Dict[str, object]:
        return {"steps": self.steps, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: Dict[str, object]) -> None:
        self.steps = int(state["steps"])
        self.m = [np.array(m, dtype=p.dtype) for m, p in zip(state["m"], self.params)]
        self.v = [np.array(v, dtype=p.dtype) for v, p in zip(state["v"], self.params)]


def cosine_lr(base_lr: float, iteration: int, total: int) -> float:
    """Cosine decay from base_lr at iteration 0 to 0 after the last of ``total`` iterations."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(iteration, total) / total))


class Ema:
    """Shadow copy of a network's parameters: ema <- decay * ema + (1 - decay) * param."""

    def __init__(self, net, decay: float):
        self.decay = decay
        self.shadow: Dict[str, np.ndarray] = net.state_dict()

    def update_average(self, old: np.ndarray, new: np.ndarray) -> np.ndarray:
        return old * self.decay + (1.0 - self.decay) * new

    def update(self, net) -> None:
        for name, p in net.named_parameters():
            self.shadow[name] = self.update_average(self.shadow[name], p.data)

    def copy_to(self, net) -> None:
        net.load_state_dict(self.shadow)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.shadow.items()}
