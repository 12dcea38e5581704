# core/optimizers.py
"""Gradient-step rules shared by client-side training and the server-side ServerOpt."""
import enum
from dataclasses import dataclass

import numpy as np


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    SGDM = "sgdm"
    ADAM = "adam"
    ADAGRAD = "adagrad"


@dataclass(frozen=True)
class OptimizerHyperparams:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True, eq=False)
class OptimizerState:
    kind: OptimizerKind
    step: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None

    def matches(self, kind: OptimizerKind, size: int) -> bool:
        if self.kind != kind:
            return False
        return all(m is None or m.size == size for m in (self.first_moment, self.second_moment))


def init_state(kind: OptimizerKind, size: int) -> OptimizerState:
    kind = OptimizerKind(kind)
    zeros = lambda: np.zeros(size, dtype=np.float64)  # noqa: E731
    if kind == OptimizerKind.SGD:
        return OptimizerState(kind)
    if kind == OptimizerKind.SGDM:
        return OptimizerState(kind, first_moment=zeros())
    return OptimizerState(kind, first_moment=zeros(), second_moment=zeros())


def apply_update(state: OptimizerState, values: np.ndarray, grad: np.ndarray,
                 hp: OptimizerHyperparams) -> tuple[np.ndarray, OptimizerState]:
    """One descent step `values - lr * direction(grad)`; returns new values and new state."""
    step = state.step + 1
    if state.kind == OptimizerKind.SGD:
        return values - hp.lr * grad, OptimizerState(state.kind, step)

    if state.kind == OptimizerKind.SGDM:
        velocity = hp.beta1 * state.first_moment + grad
        return values - hp.lr * velocity, OptimizerState(state.kind, step, velocity)

    if state.kind == OptimizerKind.ADAM:
        m = hp.beta1 * state.first_moment + (1.0 - hp.beta1) * grad
        v = hp.beta2 * state.second_moment + (1.0 - hp.beta2) * grad * grad
        m_hat = m / (1.0 - hp.beta1 ** step)
        v_hat = v / (1.0 - hp.beta2 ** step)
        return values - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps), OptimizerState(state.kind, step, m, v)

    # AdaGrad with a first-moment term; beta1 = 0 is plain AdaGrad
    m = hp.beta1 * state.first_moment + (1.0 - hp.beta1) * grad
    accumulator = state.second_moment + grad * grad
    return values - hp.lr * m / (np.sqrt(accumulator) + hp.eps), OptimizerState(state.kind, step, m, accumulator)
