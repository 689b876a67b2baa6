# optim.py

import logging
from typing import Sequence

import numpy as np

from exceptions import ConfigValidationError
from tensor import Tensor

logger = logging.getLogger(__name__)

ADAMW_WEIGHT_DECAY = 0.01


class PlainDescent:
    """θ ← θ − lr·grad. Саме для цього кроку виконуються оцінки дрейфу і похибки апроксимації."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3):
        if lr <= 0:
            raise ConfigValidationError(f"крок навчання має бути > 0, отримано {lr}")
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class AdamW:
    """Adam з відокремленим weight decay (θ ← θ − lr·wd·θ перед кроком Adam); моменти по одному масиву на параметр."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = ADAMW_WEIGHT_DECAY,
    ):
        if lr <= 0:
            raise ConfigValidationError(f"крок навчання має бути > 0, отримано {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigValidationError(f"beta1/beta2 мають бути в [0, 1): {beta1}, {beta2}")
        if weight_decay < 0:
            raise ConfigValidationError(f"weight_decay має бути >= 0, отримано {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_optimizer(name: str, params: Sequence[Tensor], lr: float):
    if name == "adamw":
        return AdamW(params, lr=lr)
    if name == "sgd":
        return PlainDescent(params, lr=lr)
    raise ConfigValidationError(f"невідомий оптимізатор: {name!r} (очікується adamw або sgd)")
