"""Command-line entry point: ``overflow <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import CorpusConfig, Utterance, generate_corpus, load_corpus, save_corpus, save_split
from .training import TrainConfig, boundary_errors, evaluate, load_checkpoint, train
from .verify import run_all


def _parse_symbols(text):
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"symbols must be integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="overflow", description="Neural HMM + flow acoustic model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("make-corpus", help="generate a synthetic corpus")
    c.add_argument("--config", required=True, help="corpus key-value (YAML) file")
    c.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="training key-value (YAML) file")
    t.add_argument("--resume", help="checkpoint to resume from")

    s = sub.add_parser("synthesize", help="generate frames for a symbol string")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True, type=_parse_symbols, help="symbol indices, e.g. '0 3 1'")
    s.add_argument("--temperature", type=float, default=0.667)
    s.add_argument("--quantile", type=float, default=0.5)
    s.add_argument("--prenet-dropout", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-frames", type=int, default=1000)
    s.add_argument("--out", required=True, help="output corpus container file")

    e = sub.add_parser("evaluate", help="held-out log-likelihood")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--corpus", help="corpus directory (default: from checkpoint config)")

    a = sub.add_parser("align", help="Viterbi alignment of one utterance")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--utterance", type=int, required=True)
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    a.add_argument("--corpus")

    v = sub.add_parser("verify", help="run the oracle suites")
    v.add_argument("--quick", action="store_true", help="fewer random instances")
    return p


def _require(path):
    if not Path(path).exists():
        raise FileNotFoundError(path)


def cmd_make_corpus(args):
    _require(args.config)
    corpus = generate_corpus(CorpusConfig.from_file(args.config))
    save_corpus(corpus, args.out)
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    print(json.dumps({"out": args.out, "sizes": sizes}))
    return 0


def cmd_train(args):
    _require(args.config)
    cfg = TrainConfig.from_file(args.config)
    if args.resume:
        _require(args.resume)
    _, _, records = train(cfg, resume=args.resume)
    vals = [r for r in records if r["kind"] == "val"]
    print(json.dumps({"out_dir": cfg.out_dir, "steps": cfg.max_updates, "last_val": vals[-1] if vals else None}))
    return 0


def cmd_synthesize(args):
    _require(args.ckpt)
    ck = load_checkpoint(args.ckpt)
    rng = np.random.default_rng(args.seed)
    x, durations = ck.model.synthesize(args.text, args.temperature, args.quantile, args.prenet_dropout, rng,
                                       max_frames=args.max_frames, return_durations=True)
    frames = ck.stats.invert(x)
    sym_durs = durations.reshape(-1, ck.config.model.states_per_symbol).sum(axis=1)
    ends = np.cumsum(sym_durs)
    utt = Utterance(args.text, frames, np.stack([ends - sym_durs, ends], axis=1))
    header = {
        "split": "synth",
        "n_symbols": ck.config.model.n_symbols,
        "frame_dim": ck.config.model.frame_dim,
        "seed": args.seed,
        "config": {"temperature": args.temperature, "quantile": args.quantile,
                   "prenet_dropout": args.prenet_dropout, "checkpoint": str(args.ckpt)},
    }
    save_split(args.out, [utt], header)
    print(json.dumps({"out": args.out, "frames": len(frames), "state_durations": durations.tolist()}))
    return 0


def _corpus_for(ck, override):
    path = override or ck.config.corpus_path
    _require(path)
    return load_corpus(path)


def cmd_evaluate(args):
    _require(args.ckpt)
    ck = load_checkpoint(args.ckpt)
    utts = _corpus_for(ck, args.corpus)[args.split]
    print(json.dumps({"split": args.split, "step": ck.step, **evaluate(ck.model, utts, ck.stats)}))
    return 0


def cmd_align(args):
    _require(args.ckpt)
    ck = load_checkpoint(args.ckpt)
    utts = _corpus_for(ck, args.corpus)[args.split]
    if not 0 <= args.utterance < len(utts):
        raise IndexError(f"utterance index {args.utterance} out of range (0..{len(utts) - 1})")
    u = utts[args.utterance]
    path = ck.model.align(ck.stats.apply(u.frames), u.symbols)
    errs = boundary_errors(ck.model, [u], ck.stats)
    print(json.dumps({
        "utterance": args.utterance,
        "states": path.states.tolist(),
        "symbol_durations": path.symbol_durations.tolist(),
        "true_durations": u.durations.tolist(),
        "boundary_errors": errs.astype(int).tolist(),
    }))
    return 0


def cmd_verify(args):
    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("verify: all suites passed" if ok else "verify: FAILURES")
    return 0 if ok else 1


COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "align": cmd_align,
    "verify": cmd_verify,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        parser.print_usage(sys.stderr)
        print(f"overflow: error: file not found: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, KeyError) as exc:
        print(f"overflow: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
