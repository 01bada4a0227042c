"""Synthetic desk-scale world with a planted set of bad tokens.

Benign text comes from a random bigram chain. Negatives come from the same
chain except that each position draws its target from the bad set with a
per-sequence rate q ~ Beta(bias / (1 - bias), 1), whose mean is ``bias``;
``bias = 1`` makes every target bad. Preference pairs compare a bad and a
good token in a random context, preferring the good one with probability
``pref_accuracy``. The true reward is -1 for emitting a bad token, +1
otherwise.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .io import rng_stream, write_json, write_jsonl, write_sequences
from .reward import PreferencePair


@dataclass(frozen=True)
class SyntheticWorldSpec:
    vocab: int = 12
    n_bad: int = 3
    bad_tokens: tuple = ()  # explicit bad set; drawn from the seed when empty
    min_len: int = 4
    max_len: int = 10
    n_train: int = 400
    n_negatives: int = 64
    n_retain: int = 200
    n_holdout: int = 64
    n_prefs: int = 3000
    bias: float = 0.8
    pref_accuracy: float = 0.95
    concentration: float = 0.5  # Dirichlet parameter of the benign chain rows
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 2:
            raise InvalidInputError("vocab must be >= 2")
        counts = (self.n_train, self.n_negatives, self.n_retain, self.n_holdout, self.n_prefs)
        if min(counts) < 1:
            raise InvalidInputError("all split counts must be >= 1")
        if not 0 < self.bias <= 1:
            raise InvalidInputError("bias must lie in (0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise InvalidInputError("need 1 <= min_len <= max_len")
        n_bad = len(self.bad_tokens) or self.n_bad
        if not 1 <= n_bad < self.vocab:
            raise InvalidInputError("bad token set must be non-empty and smaller than the vocab")
        if self.bad_tokens and not all(0 <= b < self.vocab for b in self.bad_tokens):
            raise InvalidInputError("bad token out of range")


@dataclass
class Dataset:
    train: list
    negatives: list
    retain: list
    holdout: list = field(default_factory=list)


@dataclass
class World:
    spec: SyntheticWorldSpec
    bad: np.ndarray
    chain: np.ndarray  # (V+1, V) benign transition rows, last row = BOS
    data: Dataset
    prefs: list

    def true_reward(self):
        w = np.ones((self.spec.vocab + 1, self.spec.vocab))
        w[:, self.bad] = -1.0
        return w

    def echo(self):
        d = asdict(self.spec)
        d["bad_tokens"] = [int(b) for b in self.bad]
        return d


def _sample_seq(rng, chain, length, bad_mask=None, rate=0.0):
    vocab = chain.shape[1]
    ctx = vocab
    out = []
    for _ in range(length):
        p = chain[ctx]
        if bad_mask is not None:
            part = bad_mask if rng.random() < rate else ~bad_mask
            p = np.where(part, p, 0.0)
            p = p / p.sum()
        tok = int(rng.choice(vocab, p=p))
        out.append(tok)
        ctx = tok
    return out


def generate(spec):
    s = spec
    V = s.vocab
    if s.bad_tokens:
        bad = np.array(sorted(set(int(b) for b in s.bad_tokens)))
    else:
        bad = np.sort(rng_stream(s.seed, "bad-set").choice(V, size=s.n_bad, replace=False))
    bad_mask = np.zeros(V, dtype=bool)
    bad_mask[bad] = True
    chain = rng_stream(s.seed, "chain").dirichlet(np.full(V, s.concentration), size=V + 1)
    # keep every transition reachable so restricted rows never vanish
    chain = 0.98 * chain + 0.02 / V

    def lengths(rng, k):
        return rng.integers(s.min_len, s.max_len + 1, size=k)

    rng = rng_stream(s.seed, "train")
    benign = [_sample_seq(rng, chain, L) for L in lengths(rng, s.n_train)]
    rng = rng_stream(s.seed, "retain")
    retain = [_sample_seq(rng, chain, L) for L in lengths(rng, s.n_retain)]

    def negative_pool(rng, k):
        if s.bias >= 1.0:
            rates = np.ones(k)
        else:
            rates = rng.beta(s.bias / (1.0 - s.bias), 1.0, size=k)
        return [_sample_seq(rng, chain, L, bad_mask, q) for L, q in zip(lengths(rng, k), rates)]

    negatives = negative_pool(rng_stream(s.seed, "negatives"), s.n_negatives)
    holdout = negative_pool(rng_stream(s.seed, "holdout"), s.n_holdout)

    rng = rng_stream(s.seed, "prefs")
    good = np.flatnonzero(~bad_mask)
    prefs = []
    for _ in range(s.n_prefs):
        c = int(rng.integers(V + 1))
        g = int(rng.choice(good))
        b = int(rng.choice(bad))
        if rng.random() < s.pref_accuracy:
            prefs.append(PreferencePair(c, g, b))
        else:
            prefs.append(PreferencePair(c, b, g))
    # negatives are part of the fitted corpus, as a forget set must be
    data = Dataset(train=benign + negatives, negatives=negatives, retain=retain, holdout=holdout)
    return World(spec, bad, chain, data, prefs)


def write_world(world, out_dir):
    out = Path(out_dir)
    write_sequences(out / "train.jsonl", world.data.train)
    write_sequences(out / "negatives.jsonl", world.data.negatives)
    write_sequences(out / "retain.jsonl", world.data.retain)
    write_sequences(out / "holdout.jsonl", world.data.holdout)
    write_jsonl(out / "prefs.jsonl", (p._asdict() for p in world.prefs))
    write_json(out / "world.json", world.echo())
    return out


def low_reward_mask(seq, bad):
    return np.isin(np.asarray(seq), bad)
