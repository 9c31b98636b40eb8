"""Layer stacks with named parameters, built from small recipes.

A recipe is a list of tuples::

    [("fc", 32, 64), ("relu",), ("bn", 64), ("pool", 16), ("tanh",)]

Parameters are initialised uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``
from a stream keyed by ``(seed, *key, module name, layer index)``.
"""
import hashlib

import numpy as np

from ..rng import keyed_rng
from .tensor import Tensor, as_tensor, get_dtype

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Linear:
    kind = "fc"

    def __init__(self, prefix, n_in, n_out, rng, trainable):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        b = rng.uniform(-bound, bound, size=(n_out,))
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(w, requires_grad=trainable, name=f"{prefix}.weight")
        self.bias = Tensor(b, requires_grad=trainable, name=f"{prefix}.bias")

    def params(self):
        return [self.weight, self.bias]

    def buffers(self):
        return []

    def forward(self, x, train):
        return x @ self.weight + self.bias


class BatchNorm:
    kind = "bn"

    def __init__(self, prefix, dim, trainable):
        self.dim = dim
        self.gamma = Tensor(np.ones(dim), requires_grad=trainable, name=f"{prefix}.gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=trainable, name=f"{prefix}.beta")
        self.running_mean = np.zeros(dim, dtype=get_dtype())
        self.running_var = np.ones(dim, dtype=get_dtype())

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x, train):
        if not train:
            scale = 1.0 / np.sqrt(self.running_var + BN_EPS)
            return (x - self.running_mean) * scale * self.gamma + self.beta
        n = x.shape[0]
        mu = x.mean(axis=0, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        out = centered / (var + BN_EPS).sqrt() * self.gamma + self.beta
        batch_var = var.data[0] * (n / (n - 1) if n > 1 else 1.0)
        self.running_mean[:] = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu.data[0]
        self.running_var[:] = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * batch_var
        return out


class _Activation:
    def params(self):
        return []

    def buffers(self):
        return []


class ReLU(_Activation):
    kind = "relu"

    def forward(self, x, train):
        return x.relu()


class Tanh(_Activation):
    kind = "tanh"

    def forward(self, x, train):
        return x.tanh()


class AvgPool(_Activation):
    """Adaptive 1-d average pooling from ``n_in`` features down to ``n_out``."""

    kind = "pool"

    def __init__(self, n_in, n_out):
        if not 1 <= n_out <= n_in:
            raise ValueError(f"cannot pool {n_in} features to {n_out}")
        self.n_in, self.n_out = n_in, n_out
        mat = np.zeros((n_in, n_out))
        for j in range(n_out):
            lo = (j * n_in) // n_out
            hi = -((-(j + 1) * n_in) // n_out)
            mat[lo:hi, j] = 1.0 / (hi - lo)
        self.matrix = mat

    def forward(self, x, train):
        return x @ Tensor(self.matrix)


class Module:
    """An ordered stack of layers with named, optionally frozen parameters."""

    def __init__(self, name, recipe, seed, frozen=False, key=()):
        self.name = name
        self.recipe = [tuple(step) for step in recipe]
        self.frozen = frozen
        self.layers = []
        dim = None
        for idx, step in enumerate(self.recipe):
            kind, args = step[0], step[1:]
            prefix = f"{name}.{idx}"
            if kind == "fc":
                n_in, n_out = args
                if dim is not None and n_in != dim:
                    raise ValueError(f"{prefix}: expected input dim {dim}, recipe says {n_in}")
                rng = keyed_rng(seed, *key, name, idx)
                self.layers.append(Linear(prefix, n_in, n_out, rng, not frozen))
                dim = n_out
            elif kind == "bn":
                (n,) = args
                if dim is not None and n != dim:
                    raise ValueError(f"{prefix}: batch norm over {n}, incoming dim {dim}")
                self.layers.append(BatchNorm(prefix, n, not frozen))
                dim = n
            elif kind == "pool":
                (n_out,) = args
                if dim is None:
                    raise ValueError(f"{prefix}: pooling needs a preceding sized layer")
                self.layers.append(AvgPool(dim, n_out))
                dim = n_out
            elif kind == "relu":
                self.layers.append(ReLU())
            elif kind == "tanh":
                self.layers.append(Tanh())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        sized = [layer for layer in self.layers if hasattr(layer, "n_in") or hasattr(layer, "dim")]
        if not sized:
            raise ValueError(f"{name}: recipe has no sized layer")
        first = sized[0]
        self.in_dim = first.n_in if hasattr(first, "n_in") else first.dim
        self.out_dim = dim

    def parameters(self):
        return {p.name: p for layer in self.layers for p in layer.params()}

    def forward(self, x, train=False):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected (batch, {self.in_dim}) input, got {x.shape}")
        if not np.isfinite(x.data).all():
            raise FloatingPointError(f"{self.name}: non-finite input")
        for layer in self.layers:
            x = layer.forward(x, train)
        if not np.isfinite(x.data).all():
            raise FloatingPointError(f"{self.name}: non-finite activation")
        return x

    __call__ = forward

    def state(self):
        """Copy of every parameter and buffer, keyed by a stable name."""
        out = {name: p.data.copy() for name, p in self.parameters().items()}
        for idx, layer in enumerate(self.layers):
            for j, buf in enumerate(layer.buffers()):
                out[f"{self.name}.{idx}.buffer{j}"] = buf.copy()
        return out

    def load_state(self, state):
        for name, p in self.parameters().items():
            p.data = np.array(state[name], dtype=get_dtype())
        for idx, layer in enumerate(self.layers):
            for j, buf in enumerate(layer.buffers()):
                buf[:] = state[f"{self.name}.{idx}.buffer{j}"]

    def digest(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.state().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"Module({self.name!r}, {self.recipe}, frozen={self.frozen})"
