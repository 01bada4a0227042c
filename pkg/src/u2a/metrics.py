"""Evaluation metrics: Min-k% Prob membership AUC, perplexity, reward value."""

import math

import numpy as np

from .errors import InvalidInputError
from .policy import log_softmax, total_counts, validate_seq, vocab_of
from .reward import pa_objective

DEFAULT_K_PERCENT = 20.0


def _check_k(k_percent):
    if not 0 < k_percent <= 100:
        raise InvalidInputError(f"k_percent must lie in (0, 100], got {k_percent}")


def min_k_prob_score(theta, seq, k_percent=DEFAULT_K_PERCENT):
    """Mean of the lowest ceil(k% * n) token log-probs; higher looks more like a member."""
    _check_k(k_percent)
    vocab = vocab_of(theta)
    tgt = validate_seq(seq, vocab)
    ctx = np.concatenate([[vocab], tgt[:-1]])
    lp = log_softmax(theta)[ctx, tgt]
    m = max(1, math.ceil(k_percent / 100.0 * len(lp) - 1e-9))
    return float(np.sort(lp)[:m].mean())


def auc_from_scores(pos, neg):
    """P(pos > neg) + 0.5 P(pos == neg) by exact pair counting."""
    pos, neg = np.asarray(pos, dtype=float), np.asarray(neg, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise InvalidInputError("both score sets must be non-empty")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    equal = np.searchsorted(neg_sorted, pos, side="right") - below
    return float((below.sum() + 0.5 * equal.sum()) / (pos.size * neg.size))


def mia_auc(theta, members, nonmembers, k_percent=DEFAULT_K_PERCENT):
    if len(members) == 0 or len(nonmembers) == 0:
        raise InvalidInputError("members and nonmembers must be non-empty")
    pos = [min_k_prob_score(theta, s, k_percent) for s in members]
    neg = [min_k_prob_score(theta, s, k_percent) for s in nonmembers]
    return auc_from_scores(pos, neg)


def perplexity(theta, data):
    """exp(total NLL / total tokens)."""
    counts = total_counts(data, vocab_of(theta))
    nll = -(counts * log_softmax(theta)).sum()
    return float(np.exp(nll / counts.sum()))


def reward_value(theta, reward, rho):
    return pa_objective(theta, reward, rho)
