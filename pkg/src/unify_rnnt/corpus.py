"""Synthetic transduction corpus with controllable future-context dependence.

Each symbol gets an embedding; members of an ambiguous pair share one base
embedding, and the generator constrains which symbols may follow each pair
member (low half of the alphabet after the first member, high half after the
second).  Every frame mixes the next symbol's embedding in with weight
``coarticulation``, so the evidence that separates pair members sits in the
future: the successor identity, carried mostly by the following frames.
Models without right context must guess within pairs.

Manifest format, one JSON record per line:
``{"id": str, "path": str, "frames": int, "tokens": [int, ...]}``
Feature files are raw little-endian float32, row-major [frames, feat_dim].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ManifestMismatchError, MissingFeatureFileError


@dataclass(frozen=True)
class CorpusConfig:
    n_symbols: int = 16
    feat_dim: int = 16
    min_duration: int = 1
    max_duration: int = 4
    min_symbols: int = 4
    max_symbols: int = 12
    coarticulation: float = 0.4
    noise_sigma: float = 0.3
    ambiguous_pairs: int = 4
    ambiguous_boost: float = 1.0
    seed: int = 0
    embedding_seed: int = 0

    def __post_init__(self):
        if self.min_duration < 1 or self.max_duration < self.min_duration:
            raise ValueError("durations must satisfy 1 <= min <= max")
        if self.min_symbols < 1 or self.max_symbols < self.min_symbols:
            raise ValueError("utterance lengths must satisfy 1 <= min <= max")
        if not 0.0 <= self.coarticulation < 1.0:
            raise ValueError("coarticulation must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.ambiguous_pairs * 2 > self.n_symbols:
            raise ValueError("ambiguous pairs cannot exceed n_symbols / 2")
        if self.ambiguous_boost <= 0:
            raise ValueError("ambiguous_boost must be positive")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    tokens: np.ndarray


EMBEDDING_SCALE = 1.75


def symbol_embeddings(cfg: CorpusConfig) -> np.ndarray:
    """Symbol embeddings; row 0 is the end-of-utterance successor.

    Pair members (2i-1, 2i) for i in [1, ambiguous_pairs] share one base row.
    Distinct rows come from an orthonormal frame (scaled by EMBEDDING_SCALE)
    whenever feat_dim allows, so nearest-embedding decisions are clean.

    The table depends on embedding_seed, not the sampling seed, so corpora
    with different utterance draws (train vs eval) share one geometry.
    """
    rng = np.random.default_rng(cfg.embedding_seed ^ 0x5EED)
    distinct = 1 + cfg.n_symbols - cfg.ambiguous_pairs
    if distinct <= cfg.feat_dim:
        basis, _ = np.linalg.qr(rng.standard_normal((cfg.feat_dim, cfg.feat_dim)))
        rows = basis[:distinct]
    else:
        rows = rng.standard_normal((distinct, cfg.feat_dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    emb = np.zeros((cfg.n_symbols + 1, cfg.feat_dim))
    emb[0] = rows[0]
    at = 1
    for i in range(cfg.ambiguous_pairs):
        emb[2 * i + 1] = emb[2 * i + 2] = rows[at]
        at += 1
    for s in range(2 * cfg.ambiguous_pairs + 1, cfg.n_symbols + 1):
        emb[s] = rows[at]
        at += 1
    return emb * EMBEDDING_SCALE


def ambiguous_symbols(cfg: CorpusConfig) -> set[int]:
    return set(range(1, 2 * cfg.ambiguous_pairs + 1))


def successor_sets(cfg: CorpusConfig) -> dict[int, np.ndarray]:
    """Allowed successors per symbol.

    The two members of an ambiguous pair draw successors from disjoint sets
    (split from the unambiguous symbols when possible), so the following
    symbol identifies the member; everything else may be followed by any
    symbol.  This is the sole source of future-context value.
    """
    all_syms = np.arange(1, cfg.n_symbols + 1)
    plain = np.arange(2 * cfg.ambiguous_pairs + 1, cfg.n_symbols + 1)
    pool = plain if plain.size >= 2 else all_syms
    first, second = pool[:pool.size // 2], pool[pool.size // 2:]
    out: dict[int, np.ndarray] = {}
    for s in range(1, cfg.n_symbols + 1):
        if s <= 2 * cfg.ambiguous_pairs:
            out[s] = first if s % 2 == 1 else second
        else:
            out[s] = all_syms
    return out


def _weighted_choice(rng: np.random.Generator, candidates: np.ndarray,
                     cfg: CorpusConfig, ambiguous: set[int]) -> int:
    if cfg.ambiguous_boost == 1.0:
        return int(candidates[rng.integers(len(candidates))])
    weights = np.array([cfg.ambiguous_boost if c in ambiguous else 1.0
                        for c in candidates])
    weights /= weights.sum()
    return int(rng.choice(candidates, p=weights))


def generate_utterance(rng: np.random.Generator, cfg: CorpusConfig,
                       uid: str | None = None, tables=None) -> Utterance:
    """Sample one utterance: token sequence, durations, noisy mixed features."""
    if tables is None:
        tables = (symbol_embeddings(cfg), successor_sets(cfg))
    emb, succ = tables
    ambiguous = ambiguous_symbols(cfg)
    if uid is None:
        uid = f"u{rng.integers(1 << 62):016x}"
    n = int(rng.integers(cfg.min_symbols, cfg.max_symbols + 1))
    tokens = np.empty(n, dtype=np.int64)
    tokens[0] = _weighted_choice(rng, np.arange(1, cfg.n_symbols + 1), cfg, ambiguous)
    for i in range(1, n):
        tokens[i] = _weighted_choice(rng, succ[int(tokens[i - 1])], cfg, ambiguous)
    durations = rng.integers(cfg.min_duration, cfg.max_duration + 1, size=n)
    gamma = cfg.coarticulation
    frames = []
    for i in range(n):
        nxt = int(tokens[i + 1]) if i + 1 < n else 0
        base = (1.0 - gamma) * emb[int(tokens[i])] + gamma * emb[nxt]
        noise = rng.standard_normal((int(durations[i]), cfg.feat_dim)) * cfg.noise_sigma
        frames.append(base[None, :] + noise)
    features = np.concatenate(frames, axis=0).astype(np.float32)
    return Utterance(uid, features, tokens)


def generate_utterances(cfg: CorpusConfig, n: int) -> list[Utterance]:
    rng = np.random.default_rng(cfg.seed)
    tables = (symbol_embeddings(cfg), successor_sets(cfg))
    return [generate_utterance(rng, cfg, uid=f"utt-{cfg.seed}-{i:05d}", tables=tables)
            for i in range(n)]


def generate_corpus(cfg: CorpusConfig, n: int, out_dir) -> str:
    """Write n utterances plus a manifest; returns the manifest path."""
    if n < 1:
        raise ValueError("n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as mf:
        for utt in generate_utterances(cfg, n):
            fname = f"{utt.id}.f32"
            with open(os.path.join(out_dir, fname), "wb") as fh:
                fh.write(utt.features.astype("<f4").tobytes())
            record = {"id": utt.id, "path": fname,
                      "frames": int(utt.features.shape[0]),
                      "tokens": [int(t) for t in utt.tokens]}
            mf.write(json.dumps(record) + "\n")
    return manifest_path


def load_manifest(path, feat_dim: int):
    """Yield utterances in file order, validating frame counts."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            fpath = os.path.join(base, rec["path"])
            if not os.path.exists(fpath):
                raise MissingFeatureFileError(
                    f"utterance {rec['id']}: missing feature file {rec['path']}")
            raw = np.fromfile(fpath, dtype="<f4")
            if raw.size != rec["frames"] * feat_dim:
                raise ManifestMismatchError(
                    f"utterance {rec['id']}: manifest says {rec['frames']} frames, "
                    f"file holds {raw.size // feat_dim}")
            yield Utterance(rec["id"], raw.reshape(rec["frames"], feat_dim),
                            np.asarray(rec["tokens"], dtype=np.int64))
