"""Adam optimizer and cosine-annealed learning rate."""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .exceptions import ClassSRValueError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment estimates of Adam for an ordered list of parameters."""

    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> None:
    """Apply one bias-corrected Adam update in place.

    A parameter whose gradient is None is treated as having a zero gradient.

    Raises:
        ShapeError: Parameters, gradients and moments disagree in shape.
        ClassSRValueError: lr is not positive.
    """
    if lr <= 0:
        raise ClassSRValueError(f"Learning rate must be positive: {lr}")
    if not len(params) == len(grads) == len(state.first_moment):
        raise ShapeError(
            f"{len(params)} parameters, {len(grads)} gradients and "
            f"{len(state.first_moment)} moments do not match."
        )

    state.step_count += 1
    t = state.step_count
    correction1 = 1 - state.beta1 ** t
    correction2 = 1 - state.beta2 ** t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape or state.first_moment[i].shape != param.shape:
            raise ShapeError(
                f"Gradient {grad.shape} does not match parameter {param.shape}."
            )
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        update = lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        param.data -= update.astype(param.dtype)


class Adam(object):
    """Adam over a named parameter mapping.

    Attributes:
        params (dict): Parameter name to tensor, in update order.
        state (AdamState)
    """

    def __init__(
        self, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999
    ):
        self.params: Dict[str, Tensor] = dict(params)
        self.state = AdamState.for_params(
            list(self.params.values()), beta1=beta1, beta2=beta2
        )

    def step(self, lr: float) -> None:
        params = list(self.params.values())
        adam_step(params, [p.grad for p in params], self.state, lr)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        """Flatten the moments into named arrays for checkpointing."""
        arrays = {}
        for (name, _), m, v in zip(
            self.params.items(), self.state.first_moment, self.state.second_moment
        ):
            arrays[f"{prefix}.m.{name}"] = m
            arrays[f"{prefix}.v.{name}"] = v
        return arrays

    def load_state_arrays(
        self, prefix: str, arrays: Mapping[str, np.ndarray], step_count: int
    ) -> None:
        for i, name in enumerate(self.params):
            self.state.first_moment[i] = arrays[f"{prefix}.m.{name}"].copy()
            self.state.second_moment[i] = arrays[f"{prefix}.v.{name}"].copy()
        self.state.step_count = step_count


@dataclass
class CosineSchedule:
    """Cosine annealing from ``lr_max`` down to ``lr_min`` over ``period`` steps."""

    lr_max: float = 1e-3
    lr_min: float = 1e-7
    period: int = 500000

    def __post_init__(self):
        if self.period < 1:
            raise ClassSRValueError(f"Cosine period must be positive: {self.period}")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ClassSRValueError(
                f"Need 0 <= lr_min <= lr_max: {self.lr_min}, {self.lr_max}"
            )


def lr_at(schedule: CosineSchedule, t: int) -> float:
    """Return the learning rate at iteration ``t``.

    Raises:
        ClassSRValueError: t is outside [0, period].
    """
    if not 0 <= t <= schedule.period:
        raise ClassSRValueError(
            f"Iteration {t} is outside the schedule [0, {schedule.period}]."
        )
    cosine = 1 + math.cos(math.pi * t / schedule.period)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * cosine
