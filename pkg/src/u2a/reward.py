"""Pointwise Bradley-Terry reward table and the expected-reward objective.

The reward is a lookup ``w[c, t]`` over (context, token). The alignment
objective keeps only the expected-reward term:

    J(theta) = sum_c rho(c) sum_t softmax(theta[c])_t * w[c, t]

with ``rho`` a fixed context distribution.
"""

import logging
from typing import NamedTuple

import numpy as np

from .errors import DivergenceError, FormatError, InvalidInputError
from .policy import context_target, softmax, vocab_of

log = logging.getLogger(__name__)

FORMAT = "u2a-reward-v1"


class PreferencePair(NamedTuple):
    context: int
    preferred: int
    dispreferred: int


def _pair_array(pairs, vocab):
    if len(pairs) == 0:
        raise InvalidInputError("no preference pairs")
    arr = np.asarray([tuple(p) for p in pairs], dtype=np.int64).reshape(-1, 3)
    ctx, pref, disp = arr.T
    if ctx.min() < 0 or ctx.max() > vocab:
        raise InvalidInputError("preference context out of range")
    if min(pref.min(), disp.min()) < 0 or max(pref.max(), disp.max()) >= vocab:
        raise InvalidInputError("preference token out of range")
    if np.any(pref == disp):
        raise InvalidInputError("preferred and dispreferred tokens must differ")
    return ctx, pref, disp


def bt_loss(w, pairs):
    """Mean negative log-likelihood of the pairs under the BT model."""
    ctx, pref, disp = _pair_array(pairs, vocab_of(w))
    margin = w[ctx, pref] - w[ctx, disp]
    return float(np.logaddexp(0.0, -margin).mean())


def train_reward(pairs, vocab, steps, lr, l2=1e-3):
    """Fit the reward table by minimizing ``bt_loss + l2 * ||w||^2``.

    The quadratic term is taken implicitly (proximal step), so the iteration
    stays stable for any ``l2`` while converging to the same minimizer.
    """
    if steps < 1 or lr <= 0 or l2 < 0:
        raise InvalidInputError("need steps >= 1, lr > 0, l2 >= 0")
    ctx, pref, disp = _pair_array(pairs, vocab)
    m = len(ctx)
    w = np.zeros((vocab + 1, vocab))
    shrink = 1.0 / (1.0 + 2.0 * lr * l2)
    for step in range(steps):
        margin = w[ctx, pref] - w[ctx, disp]
        coef = -np.exp(-np.logaddexp(0.0, margin)) / m  # -sigmoid(-margin) / m
        grad = np.zeros_like(w)
        np.add.at(grad, (ctx, pref), coef)
        np.add.at(grad, (ctx, disp), -coef)
        w = (w - lr * grad) * shrink
        if not np.all(np.isfinite(w)):
            raise DivergenceError("reward training", step)
    log.info("train_reward: final BT loss %.6f", bt_loss(w, pairs))
    return w


def context_distribution(seqs, vocab):
    """Empirical frequency of each context id (BOS included) over all positions."""
    if len(seqs) == 0:
        raise InvalidInputError("cannot build a context distribution from no data")
    rho = np.zeros(vocab + 1)
    for s in seqs:
        ctx, _ = context_target(s, vocab)
        np.add.at(rho, ctx, 1.0)
    return rho / rho.sum()


def _check(theta, w, rho):
    if np.shape(theta) != np.shape(w):
        raise InvalidInputError(f"theta {np.shape(theta)} and reward {np.shape(w)} differ in shape")
    if len(rho) != np.shape(theta)[0]:
        raise InvalidInputError("rho must have one entry per context row")


def pa_objective(theta, w, rho):
    _check(theta, w, rho)
    return float(rho @ (softmax(theta) * w).sum(axis=1))


def pa_grad(theta, w, rho):
    """Row c: rho(c) * (diag(pi_c) - pi_c pi_c^T) w_c."""
    _check(theta, w, rho)
    pi = softmax(theta)
    mean_r = (pi * w).sum(axis=1, keepdims=True)
    return (rho[:, None] * pi * (w - mean_r)).ravel()


def token_rewards(w, seq):
    ctx, tgt = context_target(seq, vocab_of(w))
    return w[ctx, tgt]


def reward_to_json(w):
    w = np.asarray(w, dtype=float)
    return {"format": FORMAT, "vocab": vocab_of(w), "w": w.tolist()}


def reward_from_json(doc):
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise FormatError(f"expected format {FORMAT!r}")
    vocab = doc.get("vocab")
    try:
        w = np.array(doc["w"], dtype=float)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad reward payload: {exc}") from None
    if not isinstance(vocab, int) or w.shape != (vocab + 1, vocab):
        raise FormatError(f"reward shape {w.shape} does not match vocab {vocab}")
    if not np.all(np.isfinite(w)):
        raise FormatError("reward has non-finite entries")
    return w


def pairs_from_rows(rows, vocab):
    pairs = []
    for i, r in enumerate(rows):
        try:
            p = PreferencePair(int(r["context"]), int(r["preferred"]), int(r["dispreferred"]))
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"preference line {i + 1} is malformed") from None
        pairs.append(p)
    try:
        _pair_array(pairs, vocab)
    except InvalidInputError as exc:
        raise FormatError(str(exc)) from None
    return pairs
