from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    """First/second moments for one parameter."""

    m: np.ndarray
    v: np.ndarray


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    name: str = ""


@dataclass
class Adam:
    """Bias-corrected Adam over one or more learning-rate groups.

    ``decay(factor)`` multiplies every group's learning rate, which is how the
    per-epoch schedule is applied.
    """

    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    state: dict[int, AdamState] = field(default_factory=dict)

    @classmethod
    def single(cls, params: Iterable[Tensor], lr: float, **kw) -> "Adam":
        return cls([ParamGroup(list(params), lr)], **kw)

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def decay(self, factor: float) -> None:
        for g in self.groups:
            g.lr *= factor

    def scale_lr(self, factor: float) -> None:
        self.decay(factor)

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for group in self.groups:
            for p in group.params:
                g = grads.get(p)
                if g is None:
                    g = np.zeros_like(p.data)
                if g.shape != p.shape:
                    raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
                st = self.state.get(id(p))
                if st is None:
                    st = self.state[id(p)] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                st.m *= self.beta1
                st.m += (1.0 - self.beta1) * g
                st.v *= self.beta2
                st.v += (1.0 - self.beta2) * g * g
                m_hat = st.m / c1
                v_hat = st.v / c2
                p.data = p.data - group.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_for(self, p: Tensor) -> AdamState | None:
        return self.state.get(id(p))
