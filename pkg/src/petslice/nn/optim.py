from dataclasses import dataclass

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param, grad, state, name="param"):
    """One bias-corrected Adam update, applied to ``param`` in place.

    ``state`` is mutated as well (moments and step counter). A non-finite
    gradient aborts before anything is modified.
    """
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(
            f"{name}: shape mismatch param {param.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
        raise NonFiniteGradientError(f"{name}: {bad} non-finite gradient entries at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param, state


class Adam:
    """Adam over every parameter of a module, in declaration order."""

    def __init__(self, module, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.module = module
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.states = {
            name: AdamState.zeros_like(p, **self.hyper)
            for name, p, _ in module.named_parameters()
        }

    @property
    def t(self):
        return next(iter(self.states.values())).t if self.states else 0

    def step(self):
        named = list(self.module.named_parameters())
        # check everything first so a bad gradient leaves the model untouched
        for name, _, g in named:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"{name}: non-finite gradient at step {self.t + 1}")
        for name, p, g in named:
            adam_step(p, g, self.states[name], name)
