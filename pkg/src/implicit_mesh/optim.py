"""Adam updates over named tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def optimizer_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                   unit_norm=()):
    """One Adam step, in place, over ``params`` (name -> Tensor).

    ``lr`` is a float or a name -> float map.  Parameters named in
    ``unit_norm`` are renormalized along their last axis afterwards
    (camera quaternions).
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        rate = lr[name] if isinstance(lr, dict) else lr
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
            state.t[name] = 0
        v = state.v[name]
        t = state.t[name] + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name], state.t[name] = m, v, t
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data = p.data - rate * mhat / (np.sqrt(vhat) + eps)
        if name in unit_norm:
            p.data = p.data / np.linalg.norm(p.data, axis=-1, keepdims=True)


class Adam:
    """Adam over a fixed name -> Tensor map."""

    def __init__(self, params, lr, unit_norm=()):
        self.params = dict(params)
        self.lr = lr
        self.unit_norm = tuple(unit_norm)
        self.state = AdamState()

    def step(self, grads):
        optimizer_step(self.params, grads, self.state, self.lr, unit_norm=self.unit_norm)
