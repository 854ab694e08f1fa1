"""Synthetic symbol-to-trajectory corpora with ground-truth durations.

Each symbol owns a target vector and a mean duration.  An utterance is a
random symbol string; every symbol holds its target (plus a slow linear
drift) for a random number of frames, and per-frame noise is added from a
gaussian, bimodal or skewed family.  Generation is a pure function of
:class:`CorpusConfig`; every utterance draws from its own seed derived from
(seed, split, index).

The on-disk container (one file per split) is::

    magic "OVFCORP1" | u32 version | u32 header_len | header (JSON, utf-8)
    repeated: u32 payload_len | payload | u32 crc32(payload)

    payload = u32 M | M x i32 symbols | u32 T | T*D x f64 frames
              | M x 2 x u32 boundaries

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

FORMAT_VERSION = 1
MAGIC = b"OVFCORP1"
SPLITS = ("train", "val", "test")
NOISE_FAMILIES = ("gaussian", "bimodal", "skewed")
STD_FLOOR = 1e-6


class CorpusFormatError(ValueError):
    pass


class CorpusVersionError(CorpusFormatError):
    pass


class TruncatedCorpusError(CorpusFormatError):
    pass


class ChecksumError(CorpusFormatError):
    pass


@dataclass
class CorpusConfig:
    n_symbols: int = 5
    frame_dim: int = 4
    duration_range: tuple = (3.0, 7.0)
    min_duration: int = 2
    fixed_duration: int | None = None
    target_scale: float = 1.5
    targets: list | None = None
    drift: float = 0.3
    noise: str = "bimodal"
    noise_scale: float = 0.15
    bimodal_offset: float = 0.6
    skew_shape: float = 0.75
    length_range: tuple = (2, 5)
    n_train: int = 500
    n_val: int = 50
    n_test: int = 50
    seed: int = 0

    def __post_init__(self):
        self.duration_range = tuple(float(v) for v in self.duration_range)
        self.length_range = tuple(int(v) for v in self.length_range)
        self.validate()

    def validate(self):
        lo, hi = self.duration_range
        if self.n_symbols < 1 or self.frame_dim < 1:
            raise ValueError("n_symbols and frame_dim must be positive")
        if self.min_duration < 1 or lo < self.min_duration or hi < lo:
            raise ValueError(f"bad duration range {self.duration_range} with min_duration {self.min_duration}")
        if self.fixed_duration is not None and self.fixed_duration < 1:
            raise ValueError("fixed_duration must be >= 1")
        if self.length_range[0] < 1 or self.length_range[1] < self.length_range[0]:
            raise ValueError(f"bad length range {self.length_range}")
        if self.noise not in NOISE_FAMILIES:
            raise ValueError(f"noise must be one of {NOISE_FAMILIES}, got {self.noise!r}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if self.targets is not None and np.shape(self.targets) != (self.n_symbols, self.frame_dim):
            raise ValueError(f"targets must have shape ({self.n_symbols}, {self.frame_dim})")

    def to_dict(self):
        d = asdict(self)
        d["duration_range"] = list(self.duration_range)
        d["length_range"] = list(self.length_range)
        if self.targets is not None:
            d["targets"] = np.asarray(self.targets, dtype=float).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass
class Utterance:
    symbols: np.ndarray  # (M,) int
    frames: np.ndarray  # (T, D) float64
    boundaries: np.ndarray  # (M, 2) half-open [start, end) frame spans

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.boundaries = np.asarray(self.boundaries, dtype=np.int64).reshape(-1, 2)

    @property
    def durations(self):
        return self.boundaries[:, 1] - self.boundaries[:, 0]

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and np.array_equal(self.symbols, other.symbols)
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
            and np.array_equal(self.boundaries, other.boundaries)
        )


@dataclass
class SymbolInventory:
    """Per-symbol targets, drift directions and mean durations."""

    targets: np.ndarray
    drift_dirs: np.ndarray
    mean_durations: np.ndarray
    bimodal_dir: np.ndarray


@dataclass
class Corpus:
    config: CorpusConfig
    inventory: SymbolInventory
    splits: dict = field(default_factory=dict)

    def __getitem__(self, split):
        return self.splits[split]

    @property
    def train(self):
        return self.splits["train"]

    @property
    def val(self):
        return self.splits["val"]

    @property
    def test(self):
        return self.splits["test"]


def _split_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def make_inventory(cfg):
    rng = _split_rng(cfg.seed, 7)
    k, d = cfg.n_symbols, cfg.frame_dim
    if cfg.targets is not None:
        targets = np.asarray(cfg.targets, dtype=np.float64)
    else:
        targets = rng.normal(0.0, cfg.target_scale, (k, d))
    drift = rng.normal(0.0, 1.0, (k, d))
    drift /= np.linalg.norm(drift, axis=1, keepdims=True)
    means = rng.uniform(*cfg.duration_range, size=k)
    if cfg.fixed_duration is not None:
        means = np.full(k, float(cfg.fixed_duration))
    bimodal_dir = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    return SymbolInventory(targets, drift, means, bimodal_dir)


def draw_duration(rng, mean, min_duration):
    """Shifted geometric with the given mean, truncated to [min_duration, 4 * mean]."""
    p = 1.0 / (mean - min_duration + 1.0)
    d = min_duration - 1 + rng.geometric(p)
    return int(min(d, max(min_duration, int(4 * mean))))


def draw_noise(rng, cfg, inv, n):
    d = cfg.frame_dim
    if cfg.noise == "gaussian":
        return rng.normal(0.0, cfg.noise_scale, (n, d))
    if cfg.noise == "bimodal":
        sign = rng.choice([-1.0, 1.0], size=(n, 1))
        return sign * cfg.bimodal_offset * inv.bimodal_dir + rng.normal(0.0, cfg.noise_scale, (n, d))
    s = cfg.skew_shape
    return cfg.noise_scale * (np.exp(s * rng.standard_normal((n, d))) - np.exp(0.5 * s * s))


def generate_utterance(cfg, inv, rng):
    m = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    symbols = rng.integers(0, cfg.n_symbols, size=m)
    if cfg.fixed_duration is not None:
        durs = [cfg.fixed_duration] * m
    else:
        durs = [draw_duration(rng, inv.mean_durations[s], cfg.min_duration) for s in symbols]
    segments, spans, start = [], [], 0
    for s, dur in zip(symbols, durs):
        ramp = np.linspace(-0.5, 0.5, dur)[:, None] if dur > 1 else np.zeros((1, 1))
        segments.append(inv.targets[s] + cfg.drift * ramp * inv.drift_dirs[s])
        spans.append((start, start + dur))
        start += dur
    frames = np.concatenate(segments) + draw_noise(rng, cfg, inv, start)
    return Utterance(symbols, frames, spans)


def generate_corpus(cfg):
    cfg.validate()
    inv = make_inventory(cfg)
    corpus = Corpus(cfg, inv)
    for split_id, (name, count) in enumerate(zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test))):
        corpus.splits[name] = [generate_utterance(cfg, inv, _split_rng(cfg.seed, split_id, i)) for i in range(count)]
    return corpus


# ----------------------------------------------------------------------
# feature normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, frames):
        return (np.asarray(frames, dtype=np.float64) - self.mean) / self.std

    def invert(self, frames):
        return np.asarray(frames, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def normalize_stats(split):
    if not split:
        raise ValueError("cannot compute statistics of an empty split")
    frames = np.concatenate([u.frames for u in split])
    mean, std = frames.mean(axis=0), frames.std(axis=0)
    if np.any(std < STD_FLOOR):
        warnings.warn(f"channels {np.flatnonzero(std < STD_FLOOR).tolist()} have ~zero variance; flooring std")
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean, std)


# ----------------------------------------------------------------------
# container format


def _encode_record(utt):
    m = len(utt.symbols)
    t, d = utt.frames.shape
    return b"".join([
        struct.pack("<I", m),
        utt.symbols.astype("<i4").tobytes(),
        struct.pack("<I", t),
        np.ascontiguousarray(utt.frames, dtype="<f8").tobytes(),
        utt.boundaries.astype("<u4").tobytes(),
    ])


def _decode_record(payload, d):
    (m,) = struct.unpack_from("<I", payload, 0)
    pos = 4
    symbols = np.frombuffer(payload, "<i4", m, pos).astype(np.int64)
    pos += 4 * m
    (t,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    frames = np.frombuffer(payload, "<f8", t * d, pos).astype(np.float64).reshape(t, d)
    pos += 8 * t * d
    bounds = np.frombuffer(payload, "<u4", 2 * m, pos).astype(np.int64).reshape(m, 2)
    if pos + 8 * m != len(payload):
        raise CorpusFormatError("record length does not match its contents")
    return Utterance(symbols, frames, bounds)


def save_split(path, utterances, header):
    """Write one split.  ``header`` must carry at least ``frame_dim``."""
    header = dict(header, version=FORMAT_VERSION, count=len(utterances))
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob)
        for utt in utterances:
            if utt.frames.shape[1] != header["frame_dim"]:
                raise ValueError("utterance frame width differs from header frame_dim")
            payload = _encode_record(utt)
            fh.write(struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload)))


def load_split(path):
    """Read one split; returns (header dict, list of Utterance)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CorpusFormatError(f"{path}: not a corpus container")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CorpusVersionError(f"{path}: container version {version}, expected {FORMAT_VERSION}")
    pos = len(MAGIC) + 8
    if pos + hlen > len(data):
        raise TruncatedCorpusError(f"{path}: truncated header")
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    d = header["frame_dim"]
    utts = []
    for i in range(header["count"]):
        if pos + 4 > len(data):
            raise TruncatedCorpusError(f"truncated record at utterance {i}")
        (plen,) = struct.unpack_from("<I", data, pos)
        if pos + 4 + plen + 4 > len(data):
            raise TruncatedCorpusError(f"truncated record at utterance {i}")
        payload = data[pos + 4 : pos + 4 + plen]
        (crc,) = struct.unpack_from("<I", data, pos + 4 + plen)
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch at utterance {i}")
        utts.append(_decode_record(payload, d))
        pos += plen + 8
    if pos != len(data):
        raise CorpusFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return header, utts


def split_path(directory, split):
    return Path(directory) / f"{split}.ovc"


def save_corpus(corpus, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = corpus.config
    for name, utts in corpus.splits.items():
        header = {
            "split": name,
            "n_symbols": cfg.n_symbols,
            "frame_dim": cfg.frame_dim,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "mean_durations": corpus.inventory.mean_durations.tolist(),
        }
        save_split(split_path(directory, name), utts, header)


def load_corpus(directory):
    splits, cfg = {}, None
    for name in SPLITS:
        path = split_path(directory, name)
        if not path.exists():
            continue
        header, utts = load_split(path)
        cfg = CorpusConfig.from_dict(header["config"])
        splits[name] = utts
    if cfg is None:
        raise FileNotFoundError(f"no corpus splits found in {directory}")
    return Corpus(cfg, make_inventory(cfg), splits)
