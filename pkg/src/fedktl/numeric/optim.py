import numpy as np


class SGD:
    """Plain stochastic gradient descent, no momentum."""

    kind = "sgd"

    def __init__(self, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.steps = 0

    def step(self, params, grads):
        """Update ``params`` (name -> Tensor) in place. Missing grads are skipped."""
        for name, g in list(_checked(params, grads)):
            p = params[name]
            p.data = (p.data - self.lr * g).astype(p.data.dtype, copy=False)
        self.steps += 1


class Adam:
    kind = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.steps = 0

    def step(self, params, grads):
        checked = list(_checked(params, grads))
        self.steps += 1
        t = self.steps
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in checked:
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def _checked(params, grads):
    for name in sorted(grads):
        if name not in params:
            continue
        g = grads[name]
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"{name}: non-finite gradient")
        if not p.requires_grad:
            continue
        yield name, g
