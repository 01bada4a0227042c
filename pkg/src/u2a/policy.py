"""Bigram linear-softmax policy.

Parameters are a ``(V+1, V)`` logit matrix: row ``c`` holds the next-token
logits after context token ``c``; row ``V`` is the begin-of-sequence
context. Every position of a sequence is one (context, target) pair, so all
quantities below reduce to sums over a pair-count matrix.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, FormatError, InvalidInputError

log = logging.getLogger(__name__)

FORMAT = "u2a-policy-v1"


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if int(self.size) < 2:
            raise InvalidInputError(f"vocab size must be >= 2, got {self.size}")

    @property
    def bos_id(self):
        return self.size

    @property
    def shape(self):
        return (self.size + 1, self.size)

    @property
    def dim(self):
        return (self.size + 1) * self.size


def validate_seq(seq, vocab, max_len=None):
    if len(seq) == 0:
        raise InvalidInputError("empty token sequence")
    arr = np.asarray(seq)
    if arr.ndim != 1 or not np.issubdtype(arr.dtype, np.integer):
        raise InvalidInputError(f"token sequence must be a flat list of ints, got {seq!r}")
    if arr.min() < 0 or arr.max() >= vocab:
        raise InvalidInputError(f"token id out of range [0, {vocab}) in {list(seq)!r}")
    if max_len is not None and len(arr) > max_len:
        raise InvalidInputError(f"sequence length {len(arr)} exceeds L_max={max_len}")
    return arr


def vocab_of(theta):
    theta = np.asarray(theta)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1] + 1:
        raise InvalidInputError(f"theta must have shape (V+1, V), got {theta.shape}")
    return theta.shape[1]


def log_softmax(theta):
    z = theta - theta.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(theta):
    return np.exp(log_softmax(theta))


def context_target(seq, vocab):
    """Contexts and targets of every position; the first context is BOS."""
    tgt = validate_seq(seq, vocab)
    ctx = np.empty_like(tgt)
    ctx[0] = vocab
    ctx[1:] = tgt[:-1]
    return ctx, tgt


def pair_counts(seq, vocab):
    ctx, tgt = context_target(seq, vocab)
    counts = np.zeros((vocab + 1, vocab))
    np.add.at(counts, (ctx, tgt), 1.0)
    return counts


def count_tensor(seqs, vocab):
    """Stack of per-sequence pair counts, shape ``(n, V+1, V)``."""
    out = np.zeros((len(seqs), vocab + 1, vocab))
    for i, s in enumerate(seqs):
        ctx, tgt = context_target(s, vocab)
        np.add.at(out[i], (ctx, tgt), 1.0)
    return out


def total_counts(data, vocab):
    if len(data) == 0:
        raise InvalidInputError("dataset is empty")
    return count_tensor(data, vocab).sum(axis=0)


def nll_loss(theta, data):
    """Mean over sequences of the summed per-token negative log-likelihood."""
    vocab = vocab_of(theta)
    counts = total_counts(data, vocab)
    return float(-(counts * log_softmax(theta)).sum() / len(data))


def nll_grad(theta, data):
    vocab = vocab_of(theta)
    counts = total_counts(data, vocab)
    n_ctx = counts.sum(axis=1, keepdims=True)
    return ((n_ctx * softmax(theta) - counts) / len(data)).ravel()


def sequence_logprobs(theta, seq):
    ctx, tgt = context_target(seq, vocab_of(theta))
    return log_softmax(theta)[ctx, tgt]


def train_mle(data, vocab, steps, lr, theta0=None, grad_tol=1e-12):
    """Full-batch gradient descent on :func:`nll_loss`.

    Starts from zeros unless ``theta0`` is given, and stops early once the
    gradient norm drops to ``grad_tol`` (a fitted init is returned as is).
    """
    if steps < 1 or lr <= 0:
        raise InvalidInputError(f"need steps >= 1 and lr > 0 (got {steps}, {lr})")
    counts = total_counts(data, vocab)
    n_ctx = counts.sum(axis=1, keepdims=True)
    m = len(data)
    theta = np.zeros((vocab + 1, vocab)) if theta0 is None else np.array(theta0, dtype=float)
    loss = np.nan
    for step in range(steps):
        lsm = log_softmax(theta)
        loss = -(counts * lsm).sum() / m
        if not np.isfinite(loss):
            raise DivergenceError("MLE training", step, loss)
        grad = (n_ctx * np.exp(lsm) - counts) / m
        if np.linalg.norm(grad) <= grad_tol:
            break
        theta = theta - lr * grad
    log.info("train_mle: final loss %.6f", loss)
    return theta


def policy_to_json(theta):
    theta = np.asarray(theta, dtype=float)
    return {"format": FORMAT, "vocab": vocab_of(theta), "theta": theta.tolist()}


def policy_from_json(doc):
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise FormatError(f"expected format {FORMAT!r}")
    vocab = doc.get("vocab")
    try:
        theta = np.array(doc["theta"], dtype=float)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad theta payload: {exc}") from None
    if not isinstance(vocab, int) or theta.shape != (vocab + 1, vocab):
        raise FormatError(f"theta shape {theta.shape} does not match vocab {vocab}")
    if not np.all(np.isfinite(theta)):
        raise FormatError("theta has non-finite entries")
    return theta
