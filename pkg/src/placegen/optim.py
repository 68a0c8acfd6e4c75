"""Adam over the flat parameter dict."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam.  A parameter with an all-zero gradient is a no-op,
    so optimizing the full dict while only some gradients are live leaves
    the rest bit-identical."""

    def __init__(self, names, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = list(names)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name in self.names:
            g = grads[name].astype(params[name].dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / b1t
            vhat = v / b2t
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def global_grad_norm(grads: dict[str, np.ndarray], names=None) -> float:
    names = grads.keys() if names is None else names
    total = 0.0
    for n in names:
        total += float((grads[n].astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def clip_grads_(grads: dict[str, np.ndarray], max_norm: float, names=None) -> float:
    """Scale gradients in place to a maximum global norm; returns the norm."""
    norm = global_grad_norm(grads, names)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for n in (grads.keys() if names is None else names):
            grads[n] *= scale
    return norm
