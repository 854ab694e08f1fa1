"""Invertible post-net: ActNorm, LU channel mixing and affine coupling layers.

Every layer maps (B, T, D) tensors in both directions and returns a
per-sequence log-determinant of shape (B,).  ``mask`` is a (B, T) array of
ones for real frames and zeros for padding; padded frames never influence
real ones and do not contribute to the log-determinant.

Direction convention: ``forward`` maps source (latent) frames z to data
frames x, ``inverse`` maps x back to z.  The inverse log-determinant is the
one that enters the change-of-variables likelihood.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv1d, Module

ALPHA_FLOOR = 1e-4
# softplus(ALPHA_SHIFT) + ALPHA_FLOOR == 1, so zero raw output is the identity
ALPHA_SHIFT = float(np.log(np.expm1(1.0 - ALPHA_FLOOR)))


def _as_batch(x, mask):
    x = ad.as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"expected (B, T, D) frames, got shape {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[:2])
    return x, np.asarray(mask, dtype=np.float64)


class ActNorm(Module):
    """Per-channel affine map ``x = z * exp(log_scale) + bias``.

    The data-dependent initialisation runs in the data-to-latent direction so
    that the first batch leaves the layer with zero mean and unit variance.
    """

    def __init__(self, channels, std_floor=1e-6):
        super().__init__()
        self.channels = channels
        self.std_floor = std_floor
        self.log_scale = self.add_param("log_scale", np.zeros(channels))
        self.bias = self.add_param("bias", np.zeros(channels))
        self._init_flag = self.add_buffer("initialized", [0.0])

    @property
    def initialized(self):
        return bool(self._init_flag[0])

    @initialized.setter
    def initialized(self, value):
        self._init_flag[0] = float(value)

    def initialize(self, x, mask=None):
        if self.initialized:
            raise RuntimeError("ActNorm layer already initialised")
        x, mask = _as_batch(x, mask)
        frames = x.data[mask > 0]
        mu = frames.mean(axis=0)
        std = np.maximum(frames.std(axis=0), self.std_floor)
        self.bias.data = mu
        self.log_scale.data = np.log(std)
        self.initialized = True

    @property
    def scale(self):
        """Scale applied in the data-to-latent direction."""
        return np.exp(-self.log_scale.data)

    def forward(self, z, mask=None):
        z, mask = _as_batch(z, mask)
        x = z * ad.exp(self.log_scale) + self.bias
        return x, ad.sum(self.log_scale) * mask.sum(axis=1)

    def inverse(self, x, mask=None):
        x, mask = _as_batch(x, mask)
        z = (x - self.bias) * ad.exp(-self.log_scale)
        return z, -ad.sum(self.log_scale) * mask.sum(axis=1)


class ChannelMix(Module):
    """Invertible D x D channel mixing ``x_t = W z_t`` with ``W = P L U``.

    P is a fixed permutation, L unit lower triangular, and U upper triangular
    with diagonal ``sign * exp(log_diag)``, so log|det W| = sum(log_diag).
    """

    def __init__(self, channels, rng=None, weight=None):
        super().__init__()
        self.channels = d = channels
        if weight is None:
            rng = rng or np.random.default_rng()
            weight = np.linalg.qr(rng.standard_normal((d, d)))[0]
        p, lower, upper = scipy.linalg.lu(np.asarray(weight, dtype=np.float64))
        diag = np.diag(upper)
        if np.any(diag == 0):
            raise ValueError("channel-mix weight must be invertible")
        self.perm = self.add_buffer("perm", p)
        self.sign = self.add_buffer("sign", np.sign(diag))
        self.lower = self.add_param("lower", np.tril(lower, -1))
        self.upper = self.add_param("upper", np.triu(upper, 1))
        self.log_diag = self.add_param("log_diag", np.log(np.abs(diag)))
        self._strict_lower = np.tril(np.ones((d, d)), -1)
        self._strict_upper = np.triu(np.ones((d, d)), 1)
        self._eye = np.eye(d)

    def factors(self):
        diag = ad.exp(self.log_diag) * self.sign
        lower = self.lower * self._strict_lower + self._eye
        upper = self.upper * self._strict_upper + self._eye * diag
        return lower, upper

    def weight(self):
        lower, upper = self.factors()
        return ad.matmul(ad.matmul(Tensor(self.perm), lower), upper)

    def forward(self, z, mask=None):
        z, mask = _as_batch(z, mask)
        x = z @ self.weight().T
        return x, ad.sum(self.log_diag) * mask.sum(axis=1)

    def inverse(self, x, mask=None):
        x, mask = _as_batch(x, mask)
        b, t, d = x.shape
        lower, upper = self.factors()
        cols = x.reshape(b * t, d) @ Tensor(self.perm)  # rows of (P^T x)^T
        y = ad.triangular_solve(lower, cols.T, lower=True, unit_diagonal=True)
        z = ad.triangular_solve(upper, y, lower=False)
        return z.T.reshape(b, t, d), -ad.sum(self.log_diag) * mask.sum(axis=1)


class CouplingLayer(Module):
    """Affine coupling: half the channels are scaled and shifted per frame.

    The scale/shift come from a stack of non-causal temporal convolutions that
    read the untouched half across neighbouring frames.  With ``swap`` the
    roles of the two halves are exchanged.  The final convolution starts at
    zero, so a fresh layer is the identity map.
    """

    def __init__(self, channels, rng, hidden=32, dilations=(1, 2), kernel_size=3, swap=False):
        super().__init__()
        if channels % 2:
            raise ValueError(f"coupling needs an even channel count, got {channels}")
        self.channels = channels
        self.half = channels // 2
        self.swap = swap
        self.convs = []
        n_in = self.half
        for i, dil in enumerate(dilations):
            self.convs.append(self.add_child(f"conv{i}", Conv1d(n_in, hidden, rng, kernel_size, dil)))
            n_in = hidden
        self.out = self.add_child("out", Conv1d(n_in, channels, rng, kernel_size=1, zero=True))

    @property
    def receptive_field(self):
        """Frames on either side of t that can influence output frame t."""
        return int(sum(c.radius for c in self.convs))

    def _split(self, x):
        a, b = x[..., : self.half], x[..., self.half :]
        return (b, a) if self.swap else (a, b)

    def _join(self, keep, moved):
        return ad.concat([moved, keep] if self.swap else [keep, moved], axis=-1)

    def scale_shift(self, keep, mask):
        m = Tensor(mask[..., None])
        h = keep * m
        for conv in self.convs:
            h = ad.tanh(conv(h)) * m
        raw = self.out(h)
        alpha = ad.softplus(raw[..., : self.half] + ALPHA_SHIFT) + ALPHA_FLOOR
        return alpha, raw[..., self.half :]

    def _logdet(self, alpha, mask):
        return ad.sum(ad.log(alpha) * Tensor(mask[..., None]), axis=(1, 2))

    def forward(self, z, mask=None):
        z, mask = _as_batch(z, mask)
        keep, moved = self._split(z)
        alpha, beta = self.scale_shift(keep, mask)
        return self._join(keep, alpha * moved + beta), self._logdet(alpha, mask)

    def inverse(self, x, mask=None):
        x, mask = _as_batch(x, mask)
        keep, moved = self._split(x)
        alpha, beta = self.scale_shift(keep, mask)
        return self._join(keep, (moved - beta) / alpha), -self._logdet(alpha, mask)


class FlowStack(Module):
    """Ordered invertible layers; ``forward`` applies them first to last."""

    def __init__(self, layers=()):
        super().__init__()
        self.layers = []
        for layer in layers:
            self.append(layer)

    def append(self, layer):
        self.add_child(str(len(self.layers)), layer)
        self.layers.append(layer)
        return layer

    @classmethod
    def glow(cls, channels, n_blocks, rng, hidden=32, dilations=(1, 2)):
        """Repeated (ActNorm, ChannelMix, Coupling) blocks with alternating split."""
        stack = cls()
        for i in range(n_blocks):
            stack.append(ActNorm(channels))
            stack.append(ChannelMix(channels, rng))
            stack.append(CouplingLayer(channels, rng, hidden=hidden, dilations=dilations, swap=bool(i % 2)))
        return stack

    @property
    def receptive_field(self):
        return int(sum(getattr(layer, "receptive_field", 0) for layer in self.layers))

    @property
    def needs_init(self):
        return any(isinstance(layer, ActNorm) and not layer.initialized for layer in self.layers)

    def initialize(self, x, mask=None):
        """Data-dependent ActNorm initialisation on a batch of data frames."""
        if not self.needs_init:
            raise RuntimeError("flow already initialised")
        h, mask = _as_batch(ad.as_tensor(x).detach(), mask)
        for layer in reversed(self.layers):
            if isinstance(layer, ActNorm) and not layer.initialized:
                layer.initialize(h, mask)
            h, _ = layer.inverse(h, mask)
            h = h.detach()

    def forward(self, z, mask=None):
        z, mask = _as_batch(z, mask)
        total = Tensor(np.zeros(z.shape[0]))
        for layer in self.layers:
            z, ld = layer.forward(z, mask)
            total = total + ld
        return z, total

    def inverse(self, x, mask=None):
        x, mask = _as_batch(x, mask)
        total = Tensor(np.zeros(x.shape[0]))
        for layer in reversed(self.layers):
            x, ld = layer.inverse(x, mask)
            total = total + ld
        return x, total


def flow_forward(z, stack):
    """Map a single (T, D) sequence from source to data space."""
    z = ad.as_tensor(z)
    x, logdet = stack.forward(z.reshape(1, *z.shape))
    return x[0], logdet[0]


def flow_inverse(x, stack):
    """Map a single (T, D) sequence from data to source space."""
    x = ad.as_tensor(x)
    z, logdet = stack.inverse(x.reshape(1, *x.shape))
    return z[0], logdet[0]


def coupling_forward(z, layer):
    return flow_forward(z, FlowStack([layer]))


def coupling_inverse(x, layer):
    return flow_inverse(x, FlowStack([layer]))


def channelmix_apply(z, mix, direction="forward"):
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    fn = flow_forward if direction == "forward" else flow_inverse
    return fn(z, FlowStack([mix]))


def actnorm_init(x, layer, mask=None):
    layer.initialize(x, mask)
