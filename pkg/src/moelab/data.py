"""Deterministic synthetic multi-domain token streams.

Each domain owns a contiguous block of the vocabulary and a first-order
Markov grammar over it: every token has ``branching`` successors with
Dirichlet-drawn probabilities. Documents start at the domain's first token and
run for a random length. Domains are interleaved by a deficit rule (always
emit the domain furthest behind its target share), so the realized token mix
tracks the requested ratios to within one document.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class Grammar:
    lo: int
    hi: int  # exclusive
    successors: np.ndarray  # [hi-lo, branching] absolute token ids
    cdf: np.ndarray  # [hi-lo, branching]


def domain_regions(vocab_size: int, n_domains: int) -> list[tuple[int, int]]:
    if n_domains < 1:
        raise ParameterError(f"n_domains must be >= 1, got {n_domains}")
    if vocab_size < n_domains:
        raise ParameterError(f"vocab_size {vocab_size} smaller than n_domains {n_domains}")
    edges = np.linspace(0, vocab_size, n_domains + 1).round().astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(n_domains)]


def build_grammars(seed: int, vocab_size: int, n_domains: int, branching: int = 4) -> list[Grammar]:
    grammars = []
    for i, (lo, hi) in enumerate(domain_regions(vocab_size, n_domains)):
        rng = np.random.default_rng([seed, 101, i])
        size = hi - lo
        b = min(branching, size)
        succ = np.stack([rng.choice(size, size=b, replace=False) for _ in range(size)]) + lo
        probs = rng.dirichlet(np.full(b, 0.7), size=size)
        grammars.append(Grammar(lo, hi, succ, np.cumsum(probs, axis=1)))
    return grammars


def synth_corpus(seed: int, n_domains: int, tokens: int, vocab_size: int = 512, mix=None,
                 branching: int = 4, doc_len=(32, 256), split: str = "train", return_domains: bool = False):
    """Generate ``tokens`` token ids (int32).

    The grammars depend only on ``seed``; ``split`` selects an independent
    sample path from the same grammars, so train and eval share a distribution.
    """
    if tokens < 0:
        raise ParameterError("tokens must be non-negative")
    if mix is None:
        mix = [7.0, 2.0, 1.0] if n_domains == 3 else [1.0] * n_domains
    mix = np.asarray(mix, dtype=np.float64)
    if mix.shape != (n_domains,) or np.any(mix <= 0):
        raise ParameterError(f"mix must have {n_domains} positive entries, got {mix.tolist()}")
    share = mix / mix.sum()
    grammars = build_grammars(seed, vocab_size, n_domains, branching)
    split_id = {"train": 0, "eval": 1}.get(split)
    if split_id is None:
        raise ParameterError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, 202, split_id])
    out = np.empty(tokens, dtype=np.int32)
    domains = np.empty(tokens, dtype=np.int8) if return_domains else None
    produced = np.zeros(n_domains)
    pos = 0
    lo_len, hi_len = doc_len
    while pos < tokens:
        dom = int(np.argmax(share * (pos + 1) - produced))
        g = grammars[dom]
        length = min(int(rng.integers(lo_len, hi_len + 1)), tokens - pos)
        u = rng.random(length)
        tok = g.lo
        for j in range(length):
            out[pos + j] = tok
            row = tok - g.lo
            tok = int(g.successors[row, np.searchsorted(g.cdf[row], u[j] * g.cdf[row, -1])])
        if return_domains:
            domains[pos:pos + length] = dom
        produced[dom] += length
        pos += length
    return (out, domains) if return_domains else out


class TokenData:
    """Train/eval streams plus deterministic batch sampling for one data config."""

    def __init__(self, cfg, vocab_size: int):
        self.cfg = cfg
        common = dict(seed=cfg.seed, n_domains=cfg.n_domains, vocab_size=vocab_size, mix=cfg.mix_weights(),
                      branching=cfg.branching, doc_len=(cfg.doc_len_min, cfg.doc_len_max))
        self.train = synth_corpus(tokens=cfg.train_tokens, split="train", **common)
        self.eval = synth_corpus(tokens=cfg.eval_tokens, split="eval", **common)

    def train_batch(self, run_seed: int, step: int, batch_size: int, seq_len: int) -> np.ndarray:
        """[batch_size, seq_len + 1] windows; depends only on (seed, step)."""
        n = self.train.size - seq_len - 1
        if n < 1:
            raise ParameterError(f"train stream of {self.train.size} tokens is shorter than seq_len+1")
        rng = np.random.default_rng([run_seed, 303, step])
        starts = rng.integers(0, n + 1, size=batch_size)
        return np.stack([self.train[s:s + seq_len + 1] for s in starts]).astype(np.int64)

    def eval_batches(self, n_batches: int, batch_size: int, seq_len: int) -> list[np.ndarray]:
        """Consecutive non-overlapping eval windows, wrapping if the stream is short."""
        width = seq_len + 1
        batches = []
        for b in range(n_batches):
            rows = []
            for r in range(batch_size):
                start = ((b * batch_size + r) * width) % max(1, self.eval.size - width + 1)
                rows.append(self.eval[start:start + width])
            batches.append(np.stack(rows).astype(np.int64))
        return batches
