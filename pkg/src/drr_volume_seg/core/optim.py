"""Adam optimiser (functional step plus a stateful wrapper)."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """
    One Adam update with bias correction, applied in place.

    ``m = b1 m + (1-b1) g``; ``v = b2 v + (1-b2) g^2``;
    ``p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)``.
    Missing gradients (None) are treated as zero.

    Returns:
        The (mutated) parameter arrays and the updated state.
    """
    beta1, beta2 = betas
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """
    Stateful optimiser over a fixed, ordered parameter list.

    Example:
        >>> opt = Adam(model.parameters(), lr=1e-4)
        >>> loss.backward(); opt.step(); opt.zero_grad()
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            lr=self.lr,
            betas=self.betas,
            eps=self.eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
