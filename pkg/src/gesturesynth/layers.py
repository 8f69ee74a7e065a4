"""Parameter containers, small feed-forward building blocks, and Adam."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, leaky_relu, matmul, relu, tanh, layernorm

__all__ = ["Module", "Linear", "MLP", "LayerNorm", "Adam", "xavier_uniform"]


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Module:
    """Minimal parameter container; children discovered by attribute scan."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{key}.{i}", item))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self):
        return sum(t.size for t in self.parameters())

    def freeze(self):
        """Stop gradient tracking for every parameter (in place)."""
        for _, t in self.named_parameters():
            t.requires_grad = False
        self._frozen = True
        return self

    @property
    def frozen(self):
        return getattr(self, "_frozen", False)

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._all_named_tensors()}

    def load_state_dict(self, state):
        tensors = dict(self._all_named_tensors())
        for name, arr in state.items():
            if name not in tensors:
                raise KeyError(f"unknown parameter {name!r}")
            t = tensors[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {arr.shape} != {t.data.shape}"
                )
            t.data[...] = arr

    def _all_named_tensors(self, prefix=""):
        """Like named_parameters but includes frozen tensors."""
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value._all_named_tensors(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item._all_named_tensors(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{key}.{i}", item))
        return out


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = Tensor(xavier_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


_ACTIVATIONS = {
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    None: lambda x: x,
}


class MLP(Module):
    """Dense stack with a hidden activation and linear output."""

    def __init__(self, dims, rng, activation="tanh", bias=True, out_activation=None):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, bias=bias) for i in range(len(dims) - 1)
        ]
        self._act = activation
        self._out_act = out_activation

    def __call__(self, x):
        act = _ACTIVATIONS[self._act]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        x = self.layers[-1](x)
        return _ACTIVATIONS[self._out_act](x)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x):
        return layernorm(x, gain=self.gain, bias=self.shift, eps=self._eps)


class Adam:
    """Adaptive moment estimation over named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def step(self, grads, lr):
        """Apply one update; ``grads`` is aligned with the named params."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for (name, p), g in zip(self.named, grads):
            gd = g.data if isinstance(g, Tensor) else np.asarray(g)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * gd
            v *= b2
            v += (1 - b2) * gd * gd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for n in self.m:
            self.m[n][...] = state["m"][n]
            self.v[n][...] = state["v"][n]
