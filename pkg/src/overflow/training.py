"""Optimiser, batching, checkpoints, metrics and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .data import NormStats, load_corpus, normalize_stats
from .model import Batch, ModelConfig, OverflowModel

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    corpus_path: str = "corpus"
    out_dir: str = "run"
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    max_updates: int = 2000
    seed: int = 0
    eval_every: int = 250
    checkpoint_every: int = 500
    temperature: float = 0.667
    quantile: float = 0.5
    prenet_dropout: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        for name in ("lr", "eps", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.max_updates < 0:
            raise ValueError("batch_size must be >= 1 and max_updates >= 0")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("eval_every and checkpoint_every must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


# ----------------------------------------------------------------------
# optimiser


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients by min(1, max_norm / ||g||); returns (grads, norm)."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
    """In-place bias-corrected Adam update of ``params`` (name -> Tensor).

    Gradients are clipped by global norm first when ``clip_norm`` is given.
    Returns the pre-clipping gradient norm.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    norm = None
    if clip_norm is not None:
        grads, norm = clip_by_global_norm(grads, clip_norm)
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm


# ----------------------------------------------------------------------
# batching


def make_batches(lengths, batch_size, seed, epoch=0):
    """Index batches for one epoch, grouped by similar length.

    Utterances are shuffled, stably sorted by length, cut into batches and
    the batch order is shuffled again; all of it determined by (seed, epoch).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(lengths) == 0:
        raise ValueError("cannot batch an empty split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2, epoch]))
    order = rng.permutation(len(lengths))
    order = order[np.argsort(np.asarray(lengths)[order], kind="stable")]
    batches = [order[i : i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def to_batch(utterances, stats, indices=None):
    utts = utterances if indices is None else [utterances[i] for i in indices]
    return Batch.from_pairs([(stats.apply(u.frames), u.symbols) for u in utts])


# ----------------------------------------------------------------------
# evaluation


def evaluate(model, utterances, stats, batch_size=32):
    """Held-out log-likelihood in data units (normalisation Jacobian included)."""
    total_ll, total_frames = 0.0, 0
    log_std = float(np.sum(np.log(stats.std)))
    with ad.no_grad():
        for i in range(0, len(utterances), batch_size):
            batch = to_batch(utterances[i : i + batch_size], stats)
            ll = model.batch_loglik(batch).data - log_std * np.asarray(batch.t_lens)
            total_ll += float(ll.sum())
            total_frames += int(np.sum(batch.t_lens))
    n = len(utterances)
    return {"loglik_per_frame": total_ll / total_frames, "loglik_per_seq": total_ll / n, "n_utts": n}


def boundary_errors(model, utterances, stats):
    """|predicted - true| end frame of every symbol except the last."""
    errs = []
    for u in utterances:
        path = model.align(stats.apply(u.frames), u.symbols)
        errs.extend(np.abs(path.symbol_boundaries[:-1] - u.boundaries[:-1, 1]).tolist())
    return np.asarray(errs, dtype=np.float64)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, adam, cfg, stats, rng, step, metrics_offset=0):
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": cfg.to_dict(),
        "stats": stats.to_dict(),
        "rng_state": rng.bit_generator.state,
        "adam_step": adam.step,
        "metrics_offset": metrics_offset,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, v in model.named_parameters().items():
        arrays[f"param/{k}"] = v.data
    for k, v in model.named_buffers().items():
        arrays[f"buffer/{k}"] = v
    for k in adam.m:
        arrays[f"adam_m/{k}"] = adam.m[k]
        arrays[f"adam_v/{k}"] = adam.v[k]
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


@dataclass
class Checkpoint:
    step: int
    config: TrainConfig
    model: OverflowModel
    stats: NormStats
    adam: AdamState
    rng: np.random.Generator
    metrics_offset: int = 0


def load_checkpoint(path):
    with np.load(path) as f:
        arrays = {k: f[k] for k in f.files}
    meta = json.loads(arrays.pop("meta").tobytes())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}")
    cfg = TrainConfig.from_dict(meta["config"])
    model = OverflowModel(cfg.model, np.random.default_rng(cfg.seed))
    sect = lambda prefix: {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}  # noqa: E731
    model.load_arrays(sect("param/"))
    model.load_buffers(sect("buffer/"))
    adam = AdamState(meta["adam_step"], sect("adam_m/"), sect("adam_v/"))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return Checkpoint(meta["step"], cfg, model, NormStats.from_dict(meta["stats"]), adam, rng,
                      meta.get("metrics_offset", 0))


# ----------------------------------------------------------------------
# training loop


class MetricsLog:
    """Append-only JSON-lines log; also kept in memory."""

    def __init__(self, path=None, truncate_to=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path and truncate_to is not None and self.path.exists():
            lines = self.path.read_text().splitlines(keepends=True)[:truncate_to]
            self.path.write_text("".join(lines))
            self.records = [json.loads(line) for line in lines]

    def write(self, record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def __len__(self):
        return len(self.records)


def train(cfg, corpus=None, resume=None, stop_after=None, write_files=True):
    """Train an :class:`OverflowModel`; returns (model, stats, metrics records).

    ``resume`` is a checkpoint path.  ``stop_after`` ends the run early at
    that step (for resume tests) without changing what any step computes.
    """
    corpus = corpus if corpus is not None else load_corpus(cfg.corpus_path)
    out_dir = Path(cfg.out_dir)
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
    train_utts = corpus.train
    val_utts = corpus.splits.get("val", [])

    if resume is not None:
        ck = load_checkpoint(resume)
        model, stats, adam, rng, step = ck.model, ck.stats, ck.adam, ck.rng, ck.step
        metrics = MetricsLog(out_dir / "metrics.jsonl" if write_files else None, truncate_to=ck.metrics_offset)
    else:
        stats = normalize_stats(train_utts)
        model = OverflowModel(cfg.model, np.random.default_rng(cfg.seed))
        adam = AdamState()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        step = 0
        if write_files and (out_dir / "metrics.jsonl").exists():
            (out_dir / "metrics.jsonl").unlink()
        metrics = MetricsLog(out_dir / "metrics.jsonl" if write_files else None)

    lengths = [len(u.frames) for u in train_utts]
    n_batches = len(make_batches(lengths, cfg.batch_size, cfg.seed, 0))
    params = model.named_parameters()
    last = stop_after if stop_after is not None else cfg.max_updates

    def checkpoint(tag):
        if write_files:
            save_checkpoint(out_dir / f"ckpt-{tag}.npz", model, adam, cfg, stats, rng, step, len(metrics))

    while step < min(last, cfg.max_updates):
        epoch, pos = divmod(step, n_batches)
        batch = to_batch(train_utts, stats, make_batches(lengths, cfg.batch_size, cfg.seed, epoch)[pos])
        if step == 0 and model.flow.needs_init:
            model.initialize_flow(batch)
        model.zero_grad()
        loss = model.nll_loss(batch, rng)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at step {step}; last good checkpoint kept")
        ad.backward(loss)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        norm = adam_step(params, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
        step += 1
        metrics.write({"kind": "train", "step": step, "nll_per_frame": loss.item(), "grad_norm": norm})
        if step % cfg.eval_every == 0 and val_utts:
            rec = evaluate(model, val_utts, stats)
            metrics.write({"kind": "val", "step": step, **rec})
            log.info("step %d: val loglik/frame %.4f", step, rec["loglik_per_frame"])
        if step % cfg.checkpoint_every == 0:
            checkpoint(f"{step:06d}")
    checkpoint("last")
    return model, stats, metrics.records
