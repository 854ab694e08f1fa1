"""Brute-force oracle suites: path enumeration, Jacobians, gradients, inverses.

Each suite returns a :class:`SuiteResult` with the worst error seen and the
tolerance it is held to.  The oracles share nothing with the code they
check beyond the network outputs: path sums enumerate every alignment and
evaluate Gaussian densities with scipy, Jacobians come from central finite
differences, determinants from LAPACK.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp as scipy_logsumexp
from scipy.stats import norm

from . import autodiff as ad
from .flow import ActNorm, ChannelMix, CouplingLayer, FlowStack
from .model import Batch, ModelConfig, OverflowModel
from .nhmm import NeuralHMM, NHMMConfig, enumerate_paths, forward_algorithm, viterbi_algorithm


@dataclass
class SuiteResult:
    name: str
    max_error: float
    tolerance: float
    instances: int
    seconds: float
    extra: str = ""

    @property
    def passed(self):
        return bool(self.max_error < self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" {self.extra}" if self.extra else ""
        return (f"[{status}] {self.name}: max error {self.max_error:.3e} (tol {self.tolerance:.0e}), "
                f"{self.instances} instances, {self.seconds:.1f}s{extra}")


def perturb(module, rng, scale):
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.shape)


# ----------------------------------------------------------------------
# lattice oracles


def random_lattice_instance(rng):
    """Tiny random neural HMM plus frames; returns the decoder outputs per cell."""
    sps = int(rng.integers(1, 3))
    m = int(rng.integers(1, 4 // sps + 1))
    n = sps * m
    t_len = int(rng.integers(n, 9))
    d = int(rng.integers(1, 4))
    cfg = NHMMConfig(n_symbols=3, frame_dim=d, states_per_symbol=sps, embed_dim=3, encoder_hidden=3,
                     state_dim=3, prenet_dim=3, lstm_hidden=4, head_hidden=4)
    model = NeuralHMM(cfg, rng)
    perturb(model, rng, 0.7)
    x = rng.normal(0.0, 1.0, (t_len, d))
    symbols = rng.integers(0, 3, m)
    with ad.no_grad():
        enc = model.encode(symbols)
        mu, sigma, tau = model.decoder.lattice(x[None], enc.vectors.data[None])
    return model, x, enc, mu.data[0], sigma.data[0], tau.data[0]


def oracle_tables(x, mu, sigma, tau):
    log_emit = norm.logpdf(x[:, None, :], mu, sigma).sum(axis=-1)
    return log_emit, np.log(tau), np.log1p(-tau)


def oracle_path_scores(log_emit, log_move, log_stay):
    t_len, n = log_emit.shape
    scores = []
    for path in enumerate_paths(t_len, n):
        s = log_emit[np.arange(t_len), path].sum()
        moves = np.diff(path) == 1
        trans = np.where(moves, log_move[np.arange(t_len - 1), path[:-1]], log_stay[np.arange(t_len - 1), path[:-1]])
        scores.append(s + trans.sum() + log_move[-1, n - 1])
    return np.array(scores)


def lattice_suite(n_instances=200, seed=0):
    """Forward and Viterbi scores against exhaustive path enumeration."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    fwd_err = vit_err = 0.0
    bound_violations = 0
    for _ in range(n_instances):
        model, x, enc, mu, sigma, tau = random_lattice_instance(rng)
        scores = oracle_path_scores(*oracle_tables(x, mu, sigma, tau))
        with ad.no_grad():
            ll, _ = model.forward_loglik(x, enc)
        path, vscore = model.viterbi(x, enc)
        fwd_err = max(fwd_err, abs(ll.item() - scipy_logsumexp(scores)))
        vit_err = max(vit_err, abs(vscore - scores.max()))
        bound_violations += vscore > ll.item() + 1e-12
    secs = time.perf_counter() - start
    return (
        SuiteResult("forward vs path enumeration", fwd_err, 1e-8, n_instances, secs),
        SuiteResult("viterbi vs best path", vit_err, 1e-8, n_instances, secs),
        SuiteResult("viterbi score above forward (count)", float(bound_violations), 1, n_instances, secs),
    )


# ----------------------------------------------------------------------
# flow oracles


def random_stack(rng, d, n_layers):
    stack = FlowStack()
    for _ in range(n_layers):
        kind = rng.integers(3)
        if kind == 0:
            layer = ActNorm(d)
            layer.initialized = True
        elif kind == 1:
            layer = ChannelMix(d, rng)
        else:
            layer = CouplingLayer(d, rng, hidden=int(rng.integers(2, 6)), dilations=(1, int(rng.integers(1, 3))),
                                  swap=bool(rng.integers(2)))
        perturb(layer, rng, 0.3)
        stack.append(layer)
    return stack


def jacobian_logdet(fn, z, eps=1e-6):
    """log|det| of the finite-difference Jacobian of fn: (T, D) -> (T, D)."""
    flat = z.reshape(-1)
    jac = np.empty((flat.size, flat.size))
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        jac[:, i] = (fn(up.reshape(z.shape)) - fn(down.reshape(z.shape))).reshape(-1) / (2 * eps)
    return np.linalg.slogdet(jac)[1]


def flow_suite(n_instances=100, seed=0, max_td_for_jacobian=24):
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    roundtrip = antisym = jac_err = 0.0
    n_jac = 0
    for i in range(n_instances):
        d = int(rng.choice([2, 4, 6, 8]))
        t_len = int(rng.integers(1, 17))
        if i % 2 == 0:  # keep half the instances small enough for a dense Jacobian
            d = int(rng.choice([2, 4]))
            t_len = int(rng.integers(1, max_td_for_jacobian // d + 1))
        stack = random_stack(rng, d, int(rng.integers(1, 9)))
        z = rng.normal(0.0, 1.0, (t_len, d))
        with ad.no_grad():
            x, ld_f = stack.forward(z[None])
            z_back, ld_i = stack.inverse(x.data)
        roundtrip = max(roundtrip, float(np.max(np.abs(z_back.data[0] - z))))
        antisym = max(antisym, abs(ld_f.data[0] + ld_i.data[0]))
        if t_len * d <= max_td_for_jacobian:

            def fwd(v):
                with ad.no_grad():
                    return stack.forward(v[None])[0].data[0]

            jac_err = max(jac_err, abs(jacobian_logdet(fwd, z) - ld_f.data[0]))
            n_jac += 1
    secs = time.perf_counter() - start
    return (
        SuiteResult("flow round trip", roundtrip, 1e-6, n_instances, secs),
        SuiteResult("flow logdet antisymmetry", antisym, 1e-8, n_instances, secs),
        SuiteResult("flow logdet vs numerical Jacobian", jac_err, 1e-5, n_jac, secs),
    )


def channelmix_suite(n_instances=20, seed=0):
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    err = 0.0
    for _ in range(n_instances):
        d, t_len = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        mix = ChannelMix(d, rng)
        perturb(mix, rng, 0.3)
        with ad.no_grad():
            _, ld = mix.forward(rng.normal(size=(1, t_len, d)))
            w = mix.weight().data
        err = max(err, abs(ld.data[0] - t_len * np.linalg.slogdet(w)[1]))
    return SuiteResult("channel mix logdet vs dense determinant", err, 1e-8, n_instances, time.perf_counter() - start)


# ----------------------------------------------------------------------
# gradients and equivalences


def tiny_model(rng, identity_flow=False, flow_blocks=2):
    cfg = ModelConfig(n_symbols=3, frame_dim=2, embed_dim=3, encoder_hidden=3, state_dim=3, prenet_dim=3,
                      lstm_hidden=4, head_hidden=4, flow_blocks=flow_blocks, flow_hidden=3, flow_dilations=(1, 2),
                      identity_flow=identity_flow)
    model = OverflowModel(cfg, rng)
    perturb(model, rng, 0.3)
    for layer in model.flow.layers:
        if isinstance(layer, ActNorm):
            layer.initialized = True
    return model


def tiny_batch(rng):
    pairs = []
    for t_len, m in ((6, 2), (5, 1), (4, 2)):
        pairs.append((rng.normal(size=(t_len, 2)), rng.integers(0, 3, m)))
    return Batch.from_pairs(pairs)


def gradient_suite(seed=0, eps=1e-5):
    """Full-model NLL gradient (dropout on, fixed mask) vs central differences."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    model = tiny_model(rng)
    batch = tiny_batch(rng)

    def loss_fn():
        return model.nll_loss(batch, np.random.default_rng(seed + 1))

    model.zero_grad()
    ad.backward(loss_fn())
    params = model.named_parameters()
    numeric = ad.numerical_gradient(lambda: loss_fn().item(), list(params.values()), eps)
    worst, worst_name = 0.0, ""
    for (name, p), g in zip(params.items(), numeric):
        e = ad.relative_error(p.grad, g)
        if e > worst:
            worst, worst_name = e, name
    return SuiteResult("NLL gradient vs finite differences", worst, 1e-4, len(params), time.perf_counter() - start,
                       f"({model.num_parameters()} scalars, worst {worst_name})")


def identity_flow_suite(n_instances=20, seed=0):
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    err = 0.0
    for _ in range(n_instances):
        model = tiny_model(rng, identity_flow=True)
        m = int(rng.integers(1, 3))
        x = rng.normal(size=(int(rng.integers(2 * m, 9)), 2))
        symbols = rng.integers(0, 3, m)
        with ad.no_grad():
            full = model.loglik(x, symbols).item()
            base, _ = model.nhmm.forward_loglik(x, model.nhmm.encode(symbols))
        err = max(err, abs(full - base.item()))
    return SuiteResult("identity flow equals neural HMM", err, 1e-10, n_instances, time.perf_counter() - start)


def forward_batch_suite(seed=0):
    """Padded batch likelihoods equal per-sequence ones."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    model = tiny_model(rng)
    batch = tiny_batch(rng)
    with ad.no_grad():
        joint = model.batch_loglik(batch).data
        single = [model.loglik(batch.frames[i, : batch.t_lens[i]], batch.symbols[i]).item() for i in range(len(batch))]
    return SuiteResult("padded batch vs singletons", float(np.max(np.abs(joint - single))), 1e-10, len(batch),
                       time.perf_counter() - start)


def raw_recursion_suite(n_instances=50, seed=0):
    """forward_algorithm / viterbi_algorithm on arbitrary tables vs enumeration."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    err = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 5))
        t_len = int(rng.integers(n, 9))
        log_emit = rng.normal(0.0, 2.0, (t_len, n))
        tau = rng.uniform(0.01, 0.99, (t_len, n))
        scores = oracle_path_scores(log_emit, np.log(tau), np.log1p(-tau))
        ll, _ = forward_algorithm(log_emit[None], np.log(tau)[None], np.log1p(-tau)[None], [t_len], [n])
        _, vs = viterbi_algorithm(log_emit, np.log(tau), np.log1p(-tau))
        err = max(err, abs(ll.data[0] - scipy_logsumexp(scores)), abs(vs - scores.max()))
    return SuiteResult("raw recursions vs enumeration", err, 1e-8, n_instances, time.perf_counter() - start)


def run_all(quick=False):
    n_lat, n_flow = (40, 30) if quick else (200, 100)
    results = [*lattice_suite(n_lat), *flow_suite(n_flow), channelmix_suite(), gradient_suite(),
               identity_flow_suite(), forward_batch_suite(), raw_recursion_suite()]
    return results
