"""Neural HMM transducer: encoder, autoregressive decoder, forward/Viterbi.

States are 0-based internally: a sequence of M symbols expands to
N = states_per_symbol * M left-to-right states 0..N-1, and the process
terminates by leaving state N-1.  Every path starts in state 0 and each
frame either stays or advances by one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LSTMCell, Linear, Module, dropout_mask

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-4
TAU_CLAMP = 1e-6


class AlignmentError(ValueError):
    """Raised when no monotone alignment exists (fewer frames than states)."""


class SynthesisError(RuntimeError):
    """Raised when sampling runs out of frames; ``partial`` holds what was made."""

    def __init__(self, message, partial, durations):
        super().__init__(message)
        self.partial = partial
        self.durations = durations


@dataclass
class NHMMConfig:
    n_symbols: int
    frame_dim: int
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


@dataclass
class EncoderStates:
    vectors: Tensor  # (N, state_dim)
    states_per_symbol: int = 2

    @property
    def n_states(self):
        return self.vectors.shape[0]

    @property
    def n_symbols(self):
        return self.n_states // self.states_per_symbol


@dataclass
class EmissionStep:
    mu: np.ndarray
    sigma: np.ndarray
    tau: float


@dataclass
class DecoderState:
    h: list
    c: list
    prev_frame: np.ndarray

    def with_frame(self, frame):
        return replace(self, prev_frame=np.asarray(frame, dtype=np.float64))


@dataclass
class LogAlphaLattice:
    log_alpha: np.ndarray  # (T, N); -inf where no complete path passes
    n_frames: int
    n_states: int


@dataclass
class AlignmentPath:
    states: np.ndarray  # (T,) 0-based state index per frame
    states_per_symbol: int = 2

    def __post_init__(self):
        s = np.asarray(self.states)
        steps = np.diff(s)
        if s[0] != 0 or np.any((steps != 0) & (steps != 1)):
            raise AssertionError(f"non-monotone alignment {s.tolist()}")

    @property
    def state_durations(self):
        return np.bincount(self.states, minlength=int(self.states[-1]) + 1)

    @property
    def symbol_durations(self):
        d = self.state_durations
        return d.reshape(-1, self.states_per_symbol).sum(axis=1)

    @property
    def symbol_boundaries(self):
        """End frame (exclusive) of each symbol."""
        return np.cumsum(self.symbol_durations)


# ----------------------------------------------------------------------
# pieces with closed forms


def emission_logprob(x, mu, sigma):
    """Diagonal-Gaussian log density summed over the last axis."""
    x, mu, sigma = ad.as_tensor(x), ad.as_tensor(mu), ad.as_tensor(sigma)
    d = mu.shape[-1]
    if x.shape[-1] != d or sigma.shape[-1] != d:
        raise ValueError(f"dimension mismatch: x {x.shape}, mu {mu.shape}, sigma {sigma.shape}")
    u = (x - mu) / sigma
    return -0.5 * d * LOG_2PI - ad.sum(ad.log(sigma) + 0.5 * u * u, axis=-1)


def quantile_transition(survival_log, tau, q):
    """Advance once the state's duration CDF 1 - prod(1 - tau_i) reaches ``q``.

    Returns ``(advance, new_survival_log)`` where the survival log is the
    running sum of log(1 - tau) over frames spent in the current state.
    """
    new = survival_log + math.log1p(-tau)
    return (-math.expm1(new)) >= q, new


def valid_cells(n_frames, n_states, t_max=None, n_max=None):
    """(T, N) boolean mask of cells lying on at least one complete path."""
    t_max = t_max or n_frames
    n_max = n_max or n_states
    t = np.arange(t_max)[:, None]
    n = np.arange(n_max)[None, :]
    return (n <= t) & (n_states - 1 - n <= n_frames - 1 - t) & (t < n_frames) & (n < n_states)


def forward_algorithm(log_emit, log_move, log_stay, t_lens, n_lens):
    """Log-space forward recursion over a padded batch.

    ``log_emit``, ``log_move`` (= log tau) and ``log_stay`` (= log(1 - tau))
    are (B, T, N) tensors.  Returns the (B,) log-likelihoods, including the
    final exit from the last state, and the (B, T, N) log-alpha table.
    """
    log_emit, log_move, log_stay = map(ad.as_tensor, (log_emit, log_move, log_stay))
    b, t_max, n_max = log_emit.shape
    for tl, nl in zip(t_lens, n_lens):
        if tl < nl:
            raise AlignmentError(f"no monotone alignment exists: {tl} frames < {nl} states")
    allowed = np.stack([valid_cells(tl, nl, t_max, n_max) for tl, nl in zip(t_lens, n_lens)])
    with np.errstate(divide="ignore"):
        cell_mask = np.log(allowed.astype(np.float64))
    blocked = np.full((b, 1), -np.inf)

    alpha = log_emit[:, 0, :] + cell_mask[:, 0, :]
    rows = [alpha]
    for t in range(1, t_max):
        stay = alpha + log_stay[:, t - 1, :]
        move = alpha + log_move[:, t - 1, :]
        if n_max > 1:
            move = ad.concat([blocked, move[:, :-1]], axis=1)
        else:
            move = Tensor(np.broadcast_to(blocked, (b, 1)))
        alpha = ad.logaddexp(stay, move) + (log_emit[:, t, :] + cell_mask[:, t, :])
        rows.append(alpha)
    table = ad.stack(rows, axis=1)
    idx_b = np.arange(b)
    t_last = np.asarray(t_lens) - 1
    n_last = np.asarray(n_lens) - 1
    loglik = table[idx_b, t_last, n_last] + log_move[idx_b, t_last, n_last]
    return loglik, table.data


def viterbi_algorithm(log_emit, log_move, log_stay):
    """Best monotone path through one (T, N) lattice.

    Ties go to staying in the current state.  Returns (path, log-prob), the
    log-prob including the final exit transition.
    """
    log_emit, log_move, log_stay = (np.asarray(a, dtype=np.float64) for a in (log_emit, log_move, log_stay))
    t_len, n = log_emit.shape
    if t_len < n:
        raise AlignmentError(f"no monotone alignment exists: {t_len} frames < {n} states")
    with np.errstate(divide="ignore"):
        mask = np.log(valid_cells(t_len, n).astype(np.float64))
    delta = np.full((t_len, n), -np.inf)
    moved = np.zeros((t_len, n), dtype=bool)
    delta[0] = log_emit[0] + mask[0]
    for t in range(1, t_len):
        stay = delta[t - 1] + log_stay[t - 1]
        move = np.full(n, -np.inf)
        move[1:] = delta[t - 1, :-1] + log_move[t - 1, :-1]
        moved[t] = move > stay
        delta[t] = np.where(moved[t], move, stay) + log_emit[t] + mask[t]
    path = np.empty(t_len, dtype=np.int64)
    path[-1] = n - 1
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = path[t] - 1 if moved[t, path[t]] else path[t]
    return path, float(delta[-1, -1] + log_move[-1, -1])


def enumerate_paths(n_frames, n_states):
    """All monotone no-skip paths of length ``n_frames`` ending in the last state."""
    for jumps in combinations(range(1, n_frames), n_states - 1):
        path = np.zeros(n_frames, dtype=np.int64)
        for j in jumps:
            path[j:] += 1
        yield path


def path_logprob(path, log_emit, log_move, log_stay):
    """Joint log-probability of frames and one path, including the exit."""
    t_len = len(path)
    total = 0.0
    for t in range(t_len):
        s = path[t]
        total += log_emit[t, s]
        if t + 1 < t_len:
            total += log_move[t, s] if path[t + 1] > s else log_stay[t, s]
    return total + log_move[t_len - 1, path[-1]]


# ----------------------------------------------------------------------
# networks


class Encoder(Module):
    """Embedding -> bidirectional LSTM -> ``states_per_symbol`` vectors per symbol."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.embedding = self.add_param("embedding", rng.normal(0.0, 0.3, (cfg.n_symbols, cfg.embed_dim)))
        self.fwd = self.add_child("fwd", LSTMCell(cfg.embed_dim, cfg.encoder_hidden, rng))
        self.bwd = self.add_child("bwd", LSTMCell(cfg.embed_dim, cfg.encoder_hidden, rng))
        self.head = self.add_child("head", Linear(2 * cfg.encoder_hidden, cfg.states_per_symbol * cfg.state_dim, rng))

    def _run(self, cell, x):
        b, m, _ = x.shape
        proj = cell.input_projection(x)
        h = c = Tensor(np.zeros((b, cell.n_hidden)))
        outs = []
        for i in range(m):
            h, c = cell.step(proj[:, i, :], h, c)
            outs.append(h)
        return ad.stack(outs, axis=1)

    def encode_batch(self, sequences):
        """Pad and encode; returns ((B, N_max, state_dim) tensor, N per sequence)."""
        cfg = self.cfg
        lens = [len(s) for s in sequences]
        if min(lens) < 1:
            raise ValueError("symbol sequences must be nonempty")
        m_max = max(lens)
        ids = np.zeros((len(sequences), m_max), dtype=np.int64)
        rev = np.tile(np.arange(m_max), (len(sequences), 1))
        for i, s in enumerate(sequences):
            s = np.asarray(s, dtype=np.int64)
            if np.any(s < 0) or np.any(s >= cfg.n_symbols):
                raise ValueError(f"symbol index out of vocabulary (size {cfg.n_symbols}): {s.tolist()}")
            ids[i, : len(s)] = s
            rev[i, : len(s)] = np.arange(len(s))[::-1]
        emb = self.embedding[ids]
        rows = np.arange(len(sequences))[:, None]
        h_fwd = self._run(self.fwd, emb)
        # the backward pass reads each sequence reversed within its own length
        h_bwd = self._run(self.bwd, emb[rows, rev])[rows, rev]
        out = self.head(ad.concat([h_fwd, h_bwd], axis=-1))
        b = len(sequences)
        states = out.reshape(b, m_max * cfg.states_per_symbol, cfg.state_dim)
        return states, [cfg.states_per_symbol * n for n in lens]

    def __call__(self, symbols):
        states, _ = self.encode_batch([symbols])
        return EncoderStates(states[0], self.cfg.states_per_symbol)


class Decoder(Module):
    """Pre-net + LSTM over previous frames; per-state heads give (mu, sigma, tau).

    The recurrence sees only previous frames, so one LSTM pass is shared by
    all states and the state vector enters at the output heads.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.frame_dim
        self.go_frame = self.add_param("go_frame", np.zeros(d))
        self.prenet = []
        n_in = d
        for i in range(cfg.prenet_layers):
            self.prenet.append(self.add_child(f"prenet{i}", Linear(n_in, cfg.prenet_dim, rng)))
            n_in = cfg.prenet_dim
        self.lstm = []
        for i in range(cfg.lstm_layers):
            self.lstm.append(self.add_child(f"lstm{i}", LSTMCell(n_in, cfg.lstm_hidden, rng)))
            n_in = cfg.lstm_hidden
        self.state_proj = self.add_child("state_proj", Linear(cfg.state_dim, cfg.head_hidden, rng, bias=False))
        self.lstm_proj = self.add_child("lstm_proj", Linear(cfg.lstm_hidden, cfg.head_hidden, rng))
        self.out = self.add_child("out", Linear(cfg.head_hidden, 2 * d + 1, rng))
        self.out.weight.data *= 0.1

    def run_prenet(self, frames, rng=None, rate=None):
        rate = self.cfg.prenet_dropout if rate is None else rate
        h = ad.as_tensor(frames)
        for layer in self.prenet:
            h = ad.tanh(layer(h))
            if rng is not None and rate > 0:
                h = h * dropout_mask(h.shape, rate, rng)
        return h

    def heads(self, lstm_out, states):
        """Emission parameters from LSTM outputs (..., H) and state vectors (..., E).

        Inputs must already be arranged to broadcast against each other.
        """
        d = self.cfg.frame_dim
        hidden = ad.tanh(self.lstm_proj(lstm_out) + self.state_proj(states))
        raw = self.out(hidden)
        mu = raw[..., :d]
        sigma = ad.softplus(raw[..., d : 2 * d]) + SIGMA_FLOOR
        tau = ad.clip(ad.sigmoid(raw[..., 2 * d]), TAU_CLAMP, 1.0 - TAU_CLAMP)
        return mu, sigma, tau

    def lattice(self, frames, states, rng=None):
        """Teacher-forced emission parameters for every (frame, state) pair.

        ``frames`` is (B, T, D), ``states`` (B, N, E).  Returns mu, sigma of
        shape (B, T, N, D) and tau of shape (B, T, N).
        """
        frames = ad.as_tensor(frames)
        b, t_len, d = frames.shape
        if d != self.cfg.frame_dim:
            raise ValueError(f"decoder expects frame width {self.cfg.frame_dim}, got {d}")
        go = self.go_frame.reshape(1, 1, d) + Tensor(np.zeros((b, 1, d)))
        prev = ad.concat([go, frames[:, :-1, :]], axis=1) if t_len > 1 else go
        x = self.run_prenet(prev, rng)
        for cell in self.lstm:
            proj = cell.input_projection(x)
            h = c = Tensor(np.zeros((b, cell.n_hidden)))
            outs = []
            for t in range(t_len):
                h, c = cell.step(proj[:, t, :], h, c)
                outs.append(h)
            x = ad.stack(outs, axis=1)
        n = states.shape[1]
        h_lstm = x.reshape(b, t_len, 1, self.cfg.lstm_hidden)
        h_state = ad.as_tensor(states).reshape(b, 1, n, self.cfg.state_dim)
        return self.heads(h_lstm, h_state)

    def initial_state(self):
        zeros = [np.zeros(cell.n_hidden) for cell in self.lstm]
        return DecoderState(list(zeros), list(zeros), self.go_frame.data.copy())

    def step(self, h_n, state, rng=None):
        """One synthesis step for state vector ``h_n``; returns (EmissionStep, state').

        The returned state carries the advanced LSTM memory; the caller sets
        its ``prev_frame`` once the frame has been emitted.
        """
        h_n = ad.as_tensor(h_n)
        if h_n.shape[-1] != self.cfg.state_dim:
            raise ValueError(f"state vector width {h_n.shape[-1]} != {self.cfg.state_dim}")
        x = self.run_prenet(state.prev_frame, rng)
        hs, cs = [], []
        for cell, h, c in zip(self.lstm, state.h, state.c):
            h, c = cell.step(cell.input_projection(x), h, c)
            hs.append(h.data)
            cs.append(c.data)
            x = h
        mu, sigma, tau = self.heads(x, h_n)
        return EmissionStep(mu.data.copy(), sigma.data.copy(), float(tau.data)), DecoderState(hs, cs, state.prev_frame)


class NeuralHMM(Module):
    def __init__(self, cfg, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.encoder = self.add_child("encoder", Encoder(cfg, rng))
        self.decoder = self.add_child("decoder", Decoder(cfg, rng))

    def encode(self, symbols):
        return self.encoder(symbols)

    def lattice_terms(self, frames, states, rng=None):
        """(B, T, N) log emission, log tau and log(1 - tau) tables."""
        mu, sigma, tau = self.decoder.lattice(frames, states, rng)
        b, t_len, d = ad.as_tensor(frames).shape
        log_emit = emission_logprob(ad.as_tensor(frames).reshape(b, t_len, 1, d), mu, sigma)
        return log_emit, ad.log(tau), ad.log(1.0 - tau)

    def batch_loglik(self, frames, states, t_lens, n_lens, rng=None):
        log_emit, log_move, log_stay = self.lattice_terms(frames, states, rng)
        return forward_algorithm(log_emit, log_move, log_stay, t_lens, n_lens)

    def forward_loglik(self, frames, enc, rng=None):
        """Exact log p(frames | symbols) for one sequence and its alpha lattice."""
        frames = ad.as_tensor(frames)
        t_len, n = frames.shape[0], enc.n_states
        if t_len < n:
            raise AlignmentError(f"no monotone alignment exists: {t_len} frames < {n} states")
        ll, table = self.batch_loglik(
            frames.reshape(1, *frames.shape), enc.vectors.reshape(1, *enc.vectors.shape), [t_len], [n], rng
        )
        return ll[0], LogAlphaLattice(table[0], t_len, n)

    def viterbi(self, frames, enc):
        frames = ad.as_tensor(frames)
        if frames.shape[0] < enc.n_states:
            raise AlignmentError(f"no monotone alignment exists: {frames.shape[0]} frames < {enc.n_states} states")
        with ad.no_grad():
            terms = self.lattice_terms(frames.reshape(1, *frames.shape), enc.vectors.reshape(1, *enc.vectors.shape))
        path, score = viterbi_algorithm(*(t.data[0] for t in terms))
        return AlignmentPath(path, enc.states_per_symbol), score

    def sample(self, enc, temperature=0.667, q=0.5, prenet_dropout=True, max_frames=1000, rng=None,
               temperature_mode="std", return_durations=False):
        return sample(enc, self.decoder, temperature, q, prenet_dropout, max_frames, rng,
                      temperature_mode, return_durations)


def sample(enc, decoder, temperature=0.667, q=0.5, prenet_dropout=True, max_frames=1000, rng=None,
           temperature_mode="std", return_durations=False):
    """Generate source frames left to right with quantile-based durations.

    ``temperature`` scales the standard deviation (``temperature_mode="std"``)
    or the variance (``"variance"``) of each frame's Gaussian; 0 emits the
    means.  ``tau`` is only consumed by the quantile rule, never sampled.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q}")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if temperature_mode not in ("std", "variance"):
        raise ValueError(f"unknown temperature_mode {temperature_mode!r}")
    n_states = enc.n_states
    if max_frames < n_states:
        raise ValueError(f"max_frames={max_frames} is below the number of states {n_states}")
    if (temperature > 0 or prenet_dropout) and rng is None:
        raise ValueError("an rng is required for stochastic sampling")
    scale = temperature if temperature_mode == "std" else math.sqrt(temperature)
    vectors = ad.as_tensor(enc.vectors)

    frames, durations = [], np.zeros(n_states, dtype=np.int64)
    n, survival = 0, 0.0
    state = decoder.initial_state()
    with ad.no_grad():
        while n < n_states:
            if len(frames) >= max_frames:
                raise SynthesisError(f"no termination within {max_frames} frames", np.array(frames), durations)
            em, state = decoder.step(vectors[n], state, rng if prenet_dropout else None)
            z = em.mu + scale * em.sigma * rng.standard_normal(em.mu.shape) if scale > 0 else em.mu.copy()
            frames.append(z)
            durations[n] += 1
            state = state.with_frame(z)
            advance, survival = quantile_transition(survival, em.tau, q)
            if advance:
                n, survival = n + 1, 0.0
    out = np.array(frames)
    return (out, durations) if return_durations else out
