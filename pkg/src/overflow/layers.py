"""Parameterised building blocks: linear maps, LSTM cells, 1-D convolutions."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Container that owns named parameter tensors and child modules."""

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}

    def add_param(self, name, value):
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name, value):
        """Non-trainable array that is still saved with the parameters."""
        self._buffers[name] = np.array(value, dtype=np.float64)
        return self._buffers[name]

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix=""):
        out = {prefix + k: v for k, v in self._buffers.items()}
        for cname, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{cname}."))
        return out

    def load_buffers(self, arrays):
        for cname, child in self._children.items():
            child.load_buffers({k[len(cname) + 1 :]: v for k, v in arrays.items() if k.startswith(cname + ".")})
        for k in self._buffers:
            if k not in arrays:
                raise KeyError(f"missing buffer {k}")
            self._buffers[k][...] = arrays[k]

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            value = np.asarray(arrays[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {value.shape} != {p.shape}")
            p.data = value.copy()


def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False, bias=True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.add_param("weight", np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out))
        self.bias = self.add_param("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects width {self.n_in}, got input shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: Bernoulli(1 - rate) scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


class LSTMCell(Module):
    """Single LSTM layer with gate order (input, forget, candidate, output)."""

    def __init__(self, n_in, n_hidden, rng, forget_bias=1.0):
        super().__init__()
        self.n_in, self.n_hidden = n_in, n_hidden
        h = n_hidden
        self.w_x = self.add_param("w_x", glorot(rng, n_in, 4 * h))
        self.w_h = self.add_param("w_h", glorot(rng, h, 4 * h))
        b = np.zeros(4 * h)
        b[h : 2 * h] = forget_bias
        self.b = self.add_param("b", b)

    def input_projection(self, x):
        """x @ W_x + b, which can be computed for all timesteps at once."""
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"LSTM expects input width {self.n_in}, got {x.shape}")
        return x @ self.w_x + self.b

    def step(self, x_proj, h_prev, c_prev):
        return lstm_gates(x_proj + ad.as_tensor(h_prev) @ self.w_h, c_prev, self.n_hidden)

    def __call__(self, x, h_prev, c_prev):
        return lstm_cell(x, h_prev, c_prev, self.w_x, self.w_h, self.b)


def lstm_gates(pre, c_prev, n_hidden):
    h = n_hidden
    sig = ad.sigmoid(pre[..., : 2 * h])
    i, f = sig[..., :h], sig[..., h:]
    o = ad.sigmoid(pre[..., 3 * h :])
    g = ad.tanh(pre[..., 2 * h : 3 * h])
    c = f * c_prev + i * g
    return o * ad.tanh(c), c


def lstm_cell(x, h_prev, c_prev, w_x, w_h, b):
    """One LSTM step; returns (h, c).  Widths are checked against the weights."""
    x, h_prev, c_prev = ad.as_tensor(x), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    n_hidden = w_h.shape[0]
    if x.shape[-1] != w_x.shape[0]:
        raise ValueError(f"LSTM input width {x.shape[-1]} != {w_x.shape[0]}")
    if h_prev.shape[-1] != n_hidden or c_prev.shape[-1] != n_hidden:
        raise ValueError(f"LSTM state width {h_prev.shape[-1]}/{c_prev.shape[-1]} != {n_hidden}")
    return lstm_gates(x @ w_x + h_prev @ w_h + b, c_prev, n_hidden)


class Conv1d(Module):
    """Non-causal 1-D convolution over time for (B, T, C) inputs, zero padded.

    Odd kernel sizes only, so output length equals input length.
    """

    def __init__(self, n_in, n_out, rng, kernel_size=3, dilation=1, zero=False):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.n_in, self.n_out = n_in, n_out
        self.kernel_size, self.dilation = kernel_size, dilation
        fan_in = n_in * kernel_size
        w = np.zeros((kernel_size * n_in, n_out)) if zero else glorot(rng, fan_in, n_out)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(n_out))

    @property
    def radius(self):
        return (self.kernel_size // 2) * self.dilation

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Conv1d expects {self.n_in} channels, got {x.shape}")
        if self.kernel_size == 1:
            return x @ self.weight + self.bias
        b, t, c = x.shape
        r = self.radius
        pad = np.zeros((b, r, c))
        xp = ad.concat([pad, x, pad], axis=1)
        taps = [xp[:, k * self.dilation : k * self.dilation + t, :] for k in range(self.kernel_size)]
        return ad.concat(taps, axis=-1) @ self.weight + self.bias
