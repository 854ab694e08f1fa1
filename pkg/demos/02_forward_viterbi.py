#!/usr/bin/env python3
# Left-to-right no-skip HMM lattices: the forward algorithm sums over all
# monotone paths, Viterbi picks the best one.  Both are checked against
# brute-force enumeration on a small random lattice.

import numpy as np

from overflow.nhmm import enumerate_paths, forward_algorithm, path_logprob, viterbi_algorithm

rng = np.random.default_rng(1)
T, N = 7, 3
log_emit = rng.normal(-1.0, 1.0, (T, N))
tau = rng.uniform(0.2, 0.8, (T, N))  # probability of leaving each state
log_move, log_stay = np.log(tau), np.log1p(-tau)

paths = list(enumerate_paths(T, N))
scores = np.array([path_logprob(p, log_emit, log_move, log_stay) for p in paths])
print(f"{len(paths)} monotone paths through {T} frames and {N} states")

ll, table = forward_algorithm(log_emit[None], log_move[None], log_stay[None], [T], [N])
print("forward log-likelihood  ", ll.data[0])
print("log sum over paths      ", np.logaddexp.reduce(scores))

best, score = viterbi_algorithm(log_emit, log_move, log_stay)
print("viterbi path            ", best.tolist(), f"score {score:.6f}")
print("best enumerated path    ", paths[int(np.argmax(scores))].tolist(), f"score {scores.max():.6f}")

# cells no complete path can visit are -inf in the alpha table
print("reachable cells:\n", np.isfinite(table[0]).astype(int))
