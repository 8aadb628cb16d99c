"""Adam with bias correction, updating a :class:`ParameterStore` in place."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    names: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, store, names=None, **kw):
        names = list(store.names() if names is None else names)
        st = cls(names, **kw)
        for n in names:
            st.m[n] = np.zeros_like(store[n].data)
            st.v[n] = np.zeros_like(store[n].data)
        return st


def adam_step(store, grads, state):
    """One bias-corrected Adam update of every parameter in ``state.names``."""
    missing = [n for n in state.names if n not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for n in state.names:
        g = np.asarray(grads[n], dtype=np.float64)
        m, v = state.m[n], state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        store[n].data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def collect_grads(store, names):
    """``{name: grad}`` for ``names``; parameters the loss did not reach are omitted."""
    return {n: store[n].grad for n in names if store[n].grad is not None}
