import math

import numpy as np
import pytest
from scipy.stats import norm

from overflow import autodiff as ad
from overflow.nhmm import (
    AlignmentError,
    AlignmentPath,
    DecoderState,
    EmissionStep,
    EncoderStates,
    NeuralHMM,
    NHMMConfig,
    SynthesisError,
    emission_logprob,
    enumerate_paths,
    forward_algorithm,
    path_logprob,
    quantile_transition,
    sample,
    viterbi_algorithm,
)


class ConstantDecoder:
    """Decoder stand-in with fixed tau and zero-mean unit emissions."""

    def __init__(self, tau, dim=2):
        self.tau, self.dim = tau, dim

    def initial_state(self):
        return DecoderState([], [], np.zeros(self.dim))

    def step(self, h_n, state, rng=None):
        return EmissionStep(np.zeros(self.dim), np.ones(self.dim), self.tau), state


def stub_enc(n_states):
    return EncoderStates(ad.Tensor(np.zeros((n_states, 3))), states_per_symbol=1)


def quantile_duration(tau, q):
    survival, d = 0.0, 0
    while True:
        d += 1
        advance, survival = quantile_transition(survival, tau, q)
        if advance:
            return d


def constant_tables(t, n, tau=0.5):
    shape = (1, t, n)
    return np.zeros(shape), np.full(shape, math.log(tau)), np.full(shape, math.log1p(-tau))


@pytest.fixture(scope="module")
def model():
    cfg = NHMMConfig(n_symbols=4, frame_dim=3, state_dim=6, embed_dim=5, encoder_hidden=4,
                     prenet_dim=5, lstm_hidden=7, head_hidden=6)
    return NeuralHMM(cfg, np.random.default_rng(0))


def test_emission_logprob_examples():
    assert emission_logprob([0.0], [0.0], [1.0]).item() == pytest.approx(-0.9189385, abs=1e-7)
    assert emission_logprob([0.4, -1.0], [0.4, -1.0], [1.0, 1.0]).item() == pytest.approx(-1.8378771, abs=1e-7)
    assert emission_logprob([1.0], [0.0], [2.0]).item() == pytest.approx(norm.logpdf(1.0, 0.0, 2.0), abs=1e-12)
    assert emission_logprob([1.0], [0.0], [2.0]).item() == pytest.approx(-1.7370857, abs=1e-7)
    with pytest.raises(ValueError):
        emission_logprob([0.0, 1.0], [0.0], [1.0])


def test_forward_stub_cases():
    ll, _ = forward_algorithm(*constant_tables(1, 1), [1], [1])
    assert ll.data[0] == pytest.approx(math.log(0.5), abs=1e-12)
    ll, table = forward_algorithm(*constant_tables(3, 2), [3], [2])
    assert ll.data[0] == pytest.approx(math.log(0.25), abs=1e-12)
    assert table[0, 0, 1] == -np.inf  # cannot be in state 1 at frame 0


def test_forward_too_few_frames():
    with pytest.raises(AlignmentError):
        forward_algorithm(*constant_tables(2, 3), [2], [3])


def test_forward_matches_enumeration_random():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(1, 5))
        t = int(rng.integers(n, 9))
        emit = rng.normal(-2, 1, (t, n))
        tau = rng.uniform(0.05, 0.95, (t, n))
        move, stay = np.log(tau), np.log1p(-tau)
        scores = [path_logprob(p, emit, move, stay) for p in enumerate_paths(t, n)]
        oracle = np.logaddexp.reduce(scores)
        ll, _ = forward_algorithm(emit[None], move[None], stay[None], [t], [n])
        assert abs(ll.data[0] - oracle) < 1e-8
        path, score = viterbi_algorithm(emit, move, stay)
        assert abs(score - max(scores)) < 1e-8
        assert score <= ll.data[0] + 1e-12
        assert path_logprob(path, emit, move, stay) == pytest.approx(score, abs=1e-10)


def test_viterbi_forced_paths():
    emit, move, stay = (a[0] for a in constant_tables(5, 1))
    assert viterbi_algorithm(emit, move, stay)[0].tolist() == [0] * 5
    emit, move, stay = (a[0] for a in constant_tables(4, 4))
    assert viterbi_algorithm(emit, move, stay)[0].tolist() == [0, 1, 2, 3]


def test_alignment_path_rejects_skips():
    with pytest.raises(AssertionError):
        AlignmentPath(np.array([0, 2, 3]))
    p = AlignmentPath(np.array([0, 0, 1, 2, 2, 3]))
    assert p.symbol_durations.tolist() == [3, 3]
    assert p.symbol_boundaries.tolist() == [3, 6]


@pytest.mark.parametrize("tau,q,expected", [(0.5, 0.5, 1), (0.1, 0.5, 7), (0.3, 0.9, 7)])
def test_quantile_examples(tau, q, expected):
    assert quantile_duration(tau, q) == expected


def test_stub_sampling_durations():
    frames, durs = sample(stub_enc(3), ConstantDecoder(0.5), temperature=0.0, q=0.5,
                          prenet_dropout=False, return_durations=True)
    assert frames.shape == (3, 2) and durs.tolist() == [1, 1, 1]
    _, durs = sample(stub_enc(2), ConstantDecoder(0.1), temperature=0.0, q=0.5,
                     prenet_dropout=False, return_durations=True)
    assert durs.tolist() == [7, 7]


def test_sampling_errors():
    with pytest.raises(SynthesisError) as err:
        sample(stub_enc(2), ConstantDecoder(1e-6), temperature=0.0, q=0.9, prenet_dropout=False, max_frames=20)
    assert len(err.value.partial) == 20
    with pytest.raises(ValueError):
        sample(stub_enc(2), ConstantDecoder(0.5), q=1.0, prenet_dropout=False, temperature=0.0)
    with pytest.raises(ValueError):
        sample(stub_enc(2), ConstantDecoder(0.5), temperature=0.5, prenet_dropout=False)


def test_encoder_shapes(model):
    enc = model.encode([0, 1, 2, 3, 1])
    assert enc.n_states == 10 and enc.vectors.shape == (10, 6)
    one = model.encode([2])
    assert one.n_states == 2 and np.all(np.isfinite(one.vectors.data))
    a, b = model.encode([0, 3]).vectors.data, model.encode([3, 0]).vectors.data
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        model.encode([0, 9])


def test_zero_heads(model):
    dec = model.decoder
    saved = dec.out.weight.data.copy(), dec.out.bias.data.copy()
    dec.out.weight.data[:] = 0.0
    dec.out.bias.data[:] = 0.0
    try:
        em, _ = dec.step(np.ones(6), dec.initial_state())
        assert np.array_equal(em.mu, np.zeros(3))
        assert np.allclose(em.sigma, math.log(2.0) + 1e-4)
        assert em.tau == 0.5
    finally:
        dec.out.weight.data, dec.out.bias.data = saved


def test_step_deterministic_without_dropout(model):
    dec, h = model.decoder, np.linspace(-1, 1, 6)
    a, _ = dec.step(h, dec.initial_state())
    b, _ = dec.step(h, dec.initial_state())
    assert np.array_equal(a.mu, b.mu) and a.tau == b.tau


def test_lattice_matches_sequential_steps(model):
    rng = np.random.default_rng(8)
    frames = rng.normal(size=(5, 3))
    enc = model.encode([1, 2])
    with ad.no_grad():
        mu, sigma, tau = model.decoder.lattice(frames[None], enc.vectors.data[None])
    for n in range(enc.n_states):
        state = model.decoder.initial_state()
        for t in range(5):
            em, state = model.decoder.step(enc.vectors.data[n], state)
            assert np.allclose(em.mu, mu.data[0, t, n], atol=1e-12)
            assert np.allclose(em.sigma, sigma.data[0, t, n], atol=1e-12)
            assert em.tau == pytest.approx(tau.data[0, t, n], abs=1e-12)
            state = state.with_frame(frames[t])


def test_decoder_mu_gradient(model):
    dec = model.decoder
    h = np.linspace(-1, 1, 6)
    params = list(dec.named_parameters().values())

    def loss():
        state = dec.initial_state().with_frame(np.array([0.3, -0.2, 0.1]))
        x = dec.run_prenet(state.prev_frame)
        for cell in dec.lstm:
            x, _ = cell.step(cell.input_projection(x), state.h[0], state.c[0])
        return ad.sum(dec.heads(x, h)[0])

    dec.zero_grad()
    ad.backward(loss())
    numeric = ad.numerical_gradient(lambda: loss().item(), params)
    for p, num in zip(params, numeric):
        g = p.grad if p.grad is not None else np.zeros_like(num)
        assert ad.relative_error(g, num) < 1e-4


def test_model_forward_and_viterbi(model):
    rng = np.random.default_rng(9)
    frames = rng.normal(size=(7, 3))
    enc = model.encode([0, 2])
    ll, lattice = model.forward_loglik(frames, enc)
    path, score = model.viterbi(frames, enc)
    assert lattice.log_alpha.shape == (7, 4)
    assert score <= ll.item()
    assert path.states[0] == 0 and path.states[-1] == 3
    with pytest.raises(AlignmentError):
        model.forward_loglik(frames[:3], enc)


def test_sample_temperature_zero_is_deterministic(model):
    enc = model.encode([1, 3, 0])
    a = model.sample(enc, temperature=0.0, prenet_dropout=False)
    b = model.sample(enc, temperature=0.0, prenet_dropout=False)
    assert a.tobytes() == b.tobytes() and len(a) >= 6
