"""Bias-corrected Adam over dictionaries of named numpy arrays (updated in place)."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError


@dataclass
class OptState:
    lr: dict  # name -> learning rate
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)  # name -> boolean/float mask on updates


def adam_step(params, grads, state: OptState):
    """One Adam step on every parameter that has both a learning rate and a gradient."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        if name not in grads or name not in state.lr:
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name in state.masks:
            g = g * state.masks[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        upd = (state.lr[name] / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        if name in state.masks:
            upd = upd * state.masks[name]
        p -= upd
    return params, state
