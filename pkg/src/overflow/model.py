"""Neural HMM source distribution followed by an invertible post-net."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flow import FlowStack
from .layers import Module
from .nhmm import AlignmentError, NeuralHMM, NHMMConfig


@dataclass
class ModelConfig:
    n_symbols: int = 5
    frame_dim: int = 4
    states_per_symbol: int = 2
    embed_dim: int = 16
    encoder_hidden: int = 16
    state_dim: int = 16
    prenet_dim: int = 16
    prenet_layers: int = 2
    prenet_dropout: float = 0.5
    lstm_hidden: int = 32
    lstm_layers: int = 1
    head_hidden: int = 32
    flow_blocks: int = 3
    flow_hidden: int = 32
    flow_dilations: tuple = (1, 2)
    identity_flow: bool = False

    def nhmm_config(self):
        fields = NHMMConfig.__dataclass_fields__
        return NHMMConfig(**{k: v for k, v in asdict(self).items() if k in fields})

    def to_dict(self):
        d = asdict(self)
        d["flow_dilations"] = list(self.flow_dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "flow_dilations" in d:
            d["flow_dilations"] = tuple(d["flow_dilations"])
        return cls(**d)


@dataclass
class Batch:
    """Padded batch of utterances in model space."""

    frames: np.ndarray  # (B, T_max, D), zero padded
    mask: np.ndarray  # (B, T_max)
    symbols: list
    t_lens: list

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty batch")
        t_lens = [len(x) for x, _ in pairs]
        d = np.shape(pairs[0][0])[1]
        frames = np.zeros((len(pairs), max(t_lens), d))
        mask = np.zeros((len(pairs), max(t_lens)))
        for i, (x, _) in enumerate(pairs):
            frames[i, : len(x)] = x
            mask[i, : len(x)] = 1.0
        return cls(frames, mask, [list(map(int, s)) for _, s in pairs], t_lens)

    def __len__(self):
        return len(self.t_lens)


class OverflowModel(Module):
    """log p(x) = log p_HMM(f^-1(x)) + log|det J_{f^-1}(x)|.

    With ``identity_flow`` the post-net is skipped and the model is the plain
    neural HMM on the data frames.
    """

    def __init__(self, cfg, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.nhmm = self.add_child("nhmm", NeuralHMM(cfg.nhmm_config(), rng))
        if cfg.identity_flow:
            self.flow = FlowStack()
        else:
            self.flow = FlowStack.glow(cfg.frame_dim, cfg.flow_blocks, rng, cfg.flow_hidden, cfg.flow_dilations)
        self.add_child("flow", self.flow)

    # -- likelihood ----------------------------------------------------

    def to_latent(self, x, mask=None):
        """Map data frames (B, T, D) to source frames plus log|det J_{f^-1}|."""
        if self.cfg.identity_flow:
            x = ad.as_tensor(x)
            return x, Tensor(np.zeros(x.shape[0]))
        return self.flow.inverse(x, mask)

    def batch_loglik(self, batch, rng=None):
        """Per-sequence log-likelihoods (B,) of a padded :class:`Batch`."""
        states, n_lens = self.nhmm.encoder.encode_batch(batch.symbols)
        for t, n in zip(batch.t_lens, n_lens):
            if t < n:
                raise AlignmentError(f"no monotone alignment exists: {t} frames < {n} states")
        z, logdet = self.to_latent(batch.frames, batch.mask)
        base, _ = self.nhmm.batch_loglik(z, states, batch.t_lens, n_lens, rng)
        return base + logdet

    def loglik(self, frames, symbols, rng=None):
        return self.batch_loglik(Batch.from_pairs([(frames, symbols)]), rng)[0]

    def nll_loss(self, batch, rng=None):
        """Negative log-likelihood per frame: -sum(loglik) / sum(T)."""
        if not isinstance(batch, Batch):
            batch = Batch.from_pairs(batch)
        ll = self.batch_loglik(batch, rng)
        return -ad.sum(ll) * (1.0 / float(np.sum(batch.t_lens)))

    def initialize_flow(self, batch):
        if self.flow.needs_init:
            self.flow.initialize(batch.frames, batch.mask)

    # -- synthesis and alignment --------------------------------------

    def synthesize(self, symbols, temperature=0.667, q=0.5, prenet_dropout=True, rng=None,
                   max_frames=1000, return_durations=False, temperature_mode="std"):
        with ad.no_grad():
            enc = self.nhmm.encode(symbols)
            z, durations = self.nhmm.sample(enc, temperature, q, prenet_dropout, max_frames, rng,
                                            temperature_mode, return_durations=True)
            x = z if self.cfg.identity_flow else self.flow.forward(z[None])[0].data[0]
        x = np.asarray(x, dtype=np.float64)
        return (x, durations) if return_durations else x

    def align(self, frames, symbols):
        """Viterbi path of the data frames; see :class:`~overflow.nhmm.AlignmentPath`."""
        with ad.no_grad():
            z, _ = self.to_latent(np.asarray(frames, dtype=np.float64)[None])
            enc = self.nhmm.encode(symbols)
            path, _ = self.nhmm.viterbi(z[0], enc)
        return path
