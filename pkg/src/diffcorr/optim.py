"""Adaptive optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, TrainingDiverged
from .tensor import Array, Tensor


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus shared step counter.

    Constants beta1/beta2/eps follow common practice; the learning rate and
    decay are the caller's to set.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    k: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    def ensure(self, params: list[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise InvalidArgument("optimizer state does not match parameter list")

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "k": self.k,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "OptimizerState":
        st = cls(
            lr=d["lr"],
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            weight_decay=d["weight_decay"],
            k=d["k"],
        )
        st.m = [np.asarray(a, dtype=np.float64).copy() for a in d["m"]]
        st.v = [np.asarray(a, dtype=np.float64).copy() for a in d["v"]]
        return st


def optimizer_step(state: OptimizerState, params: list[Tensor], grads: list[Array]) -> None:
    """One bias-corrected adaptive update with decoupled decay p <- p - lr*wd*p."""
    state.ensure(params)
    if len(grads) != len(params):
        raise InvalidArgument("grads do not match parameter list")
    for g in grads:
        if g is None or not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient in optimizer step")
    state.k += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.k
    c2 = 1.0 - b2**state.k
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay != 0.0:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
