"""Adam with a poly learning-rate schedule and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Param

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
POLY_POWER = 0.9


class ScheduleError(RuntimeError):
    pass


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = POLY_POWER) -> float:
    """``base_lr * (1 - iteration / max_iter) ** power``; zero at ``max_iter``."""
    if iteration < 0 or iteration > max_iter:
        raise ScheduleError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class OptimizerState:
    base_lr: float
    max_iter: int
    poly_power: float = POLY_POWER
    weight_decay: float = 0.0
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @property
    def lr(self) -> float:
        return poly_lr(self.base_lr, self.step, self.max_iter, self.poly_power)


class Adam:
    def __init__(self, params: list[Param], base_lr: float, max_iter: int,
                 weight_decay: float = 0.0, poly_power: float = POLY_POWER):
        self.params = list(params)
        self.state = OptimizerState(base_lr, max_iter, poly_power, weight_decay)
        self.state.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.state.second_moment = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        st = self.state
        if st.step >= st.max_iter:
            raise ScheduleError(f"step {st.step} would exceed max_iter={st.max_iter}")
        lr = st.lr
        t = st.step + 1
        c1 = 1.0 - BETA1 ** t
        c2 = 1.0 - BETA2 ** t
        for p, m, v in zip(self.params, st.first_moment, st.second_moment):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= BETA1
            m += (1 - BETA1) * g
            v *= BETA2
            v += (1 - BETA2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + EPS)
            if st.weight_decay and not p.weight_decay_exempt:
                update = update + st.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)
        st.step = t
        return lr
