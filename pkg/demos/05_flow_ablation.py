#!/usr/bin/env python3
# Train the full model and the identity-flow ablation with the same seed and
# budget, then compare held-out likelihood and alignment quality.
# UPDATES=2000 reproduces the acceptance setting (about a minute per model).

import os

import numpy as np

from overflow.data import CorpusConfig, generate_corpus
from overflow.model import ModelConfig
from overflow.training import TrainConfig, boundary_errors, evaluate, train

UPDATES = int(os.environ.get("UPDATES", 600))

corpus = generate_corpus(CorpusConfig(seed=0))
for identity in (False, True):
    cfg = TrainConfig(max_updates=UPDATES, eval_every=max(UPDATES // 4, 1), model=ModelConfig(identity_flow=identity))
    model, stats, records = train(cfg, corpus=corpus, write_files=False)
    curve = [round(r["loglik_per_frame"], 3) for r in records if r["kind"] == "val"]
    test = evaluate(model, corpus.test, stats)
    errs = boundary_errors(model, corpus.test, stats)
    name = "identity flow" if identity else "full model   "
    print(f"{name}: val curve {curve}")
    print(f"{name}: test loglik/frame {test['loglik_per_frame']:.3f}, "
          f"boundary error median {np.median(errs):.0f} mean {errs.mean():.2f}")
