"""AdamW with per-group learning rates, decay and gradient accumulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GroupState:
    lr: float
    weight_decay: float = 0.0
    accum_steps: int = 1
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    accum: np.ndarray | None = None
    updates: int = 0
    micro_steps: int = 0


@dataclass
class AdamW:
    """Decoupled weight decay Adam.

    A group with ``accum_steps = k`` sums its gradients over ``k`` calls to
    :meth:`step` and applies their mean on every k-th call.
    """

    groups: dict
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, g in self.groups.items():
            if isinstance(g, dict):
                g = GroupState(**g)
            if g.accum_steps < 1:
                raise ValueError("accum_steps must be >= 1")
            self.state[name] = g

    def step(self, params, grads):
        """Update the arrays in ``params`` in place from ``grads`` (both keyed by group)."""
        b1, b2 = self.betas
        for name, g in grads.items():
            st = self.state[name]
            p = params[name]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
            if st.m is None:
                st.m = np.zeros_like(p)
                st.v = np.zeros_like(p)
            st.micro_steps += 1
            if st.accum_steps > 1:
                st.accum = g.copy() if st.accum is None else st.accum + g
                if st.micro_steps % st.accum_steps:
                    continue
                g = st.accum / st.accum_steps
                st.accum = None
            st.updates += 1
            st.m *= b1
            st.m += (1 - b1) * g
            st.v *= b2
            st.v += (1 - b2) * g * g
            mhat = st.m / (1 - b1**st.updates)
            vhat = st.v / (1 - b2**st.updates)
            if st.weight_decay:
                p *= 1.0 - st.lr * st.weight_decay
            p -= st.lr * mhat / (np.sqrt(vhat) + self.eps)


def adamw_step(state, params, grads):
    state.step(params, grads)
    return params
