import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from u2a.errors import InvalidInputError
from u2a.metrics import auc_from_scores, mia_auc, min_k_prob_score, perplexity, reward_value
from u2a.policy import log_softmax, sequence_logprobs, train_mle
from u2a.reward import pa_objective


def roc_trapezoid_auc(pos, neg):
    """Area under the empirical ROC curve, one threshold per distinct score."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    tpr, fpr = [0.0], [0.0]
    for t in np.unique(np.concatenate([pos, neg]))[::-1]:
        tpr.append(np.mean(pos >= t))
        fpr.append(np.mean(neg >= t))
    return float(np.trapezoid(tpr, fpr))


def sort_oracle(theta, seq, k):
    V = theta.shape[1]
    lp = log_softmax(theta)
    vals = sorted(lp[c, t] for c, t in zip([V] + list(seq[:-1]), seq))
    m = max(1, math.ceil(k / 100 * len(vals) - 1e-9))
    return sum(vals[:m]) / m


def test_min_k_full_set_and_uniform():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=(6, 5))
    seq = [1, 4, 4, 0, 2, 3]
    assert min_k_prob_score(theta, seq, 100) == pytest.approx(np.mean(sequence_logprobs(theta, seq)), rel=1e-14)
    for k in (1, 20, 50, 100):
        assert min_k_prob_score(np.zeros((6, 5)), seq, k) == pytest.approx(-math.log(5), rel=1e-15)
    with pytest.raises(InvalidInputError):
        min_k_prob_score(theta, seq, 0)
    with pytest.raises(InvalidInputError):
        min_k_prob_score(theta, seq, 101)


@given(st.integers(0, 2**32 - 1), st.floats(0.5, 100.0))
def test_min_k_matches_sort_oracle(seed, k):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(2, 8))
    theta = rng.normal(size=(V + 1, V))
    seq = rng.integers(0, V, size=int(rng.integers(1, 15))).tolist()
    s = min_k_prob_score(theta, seq, k)
    assert s == pytest.approx(sort_oracle(theta, seq, k), rel=1e-13)
    assert s <= min_k_prob_score(theta, seq, 100) + 1e-12


def test_auc_trivial_cases():
    assert auc_from_scores([3.0, 4.0], [1.0, 2.0]) == 1.0
    assert auc_from_scores([1.0, 2.0], [3.0, 4.0]) == 0.0
    assert auc_from_scores([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]) == 0.5
    with pytest.raises(InvalidInputError):
        auc_from_scores([], [1.0])


@given(st.integers(0, 2**32 - 1))
def test_auc_matches_roc_oracle_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    # rounded scores force ties
    pos = np.round(rng.normal(0.3, 1.0, size=int(rng.integers(1, 30))), 1)
    neg = np.round(rng.normal(0.0, 1.0, size=int(rng.integers(1, 30))), 1)
    a = auc_from_scores(pos, neg)
    assert abs(a - roc_trapezoid_auc(pos, neg)) < 1e-12
    assert abs(a + auc_from_scores(neg, pos) - 1.0) < 1e-12


def test_mia_auc_on_sequences():
    rng = np.random.default_rng(1)
    theta = rng.normal(size=(5, 4))
    members = [rng.integers(0, 4, size=6).tolist() for _ in range(7)]
    nonmembers = [rng.integers(0, 4, size=6).tolist() for _ in range(9)]
    a = mia_auc(theta, members, nonmembers)
    b = mia_auc(theta, nonmembers, members)
    assert abs(a + b - 1.0) < 1e-12
    assert mia_auc(theta, members, members) == 0.5
    with pytest.raises(InvalidInputError):
        mia_auc(theta, [], nonmembers)


def test_perplexity_uniform_is_vocab_size():
    for V in (2, 5, 12):
        assert perplexity(np.zeros((V + 1, V)), [[0, 1], [V - 1]]) == pytest.approx(V, rel=1e-15)
    with pytest.raises(InvalidInputError):
        perplexity(np.zeros((3, 2)), [])


def test_perplexity_near_deterministic_chain():
    data = [[0, 1, 2, 0, 1, 2]] * 10
    theta = train_mle(data, 3, 20000, 1.0)
    assert perplexity(theta, data) < 1.05


def test_perplexity_concatenation_identity():
    rng = np.random.default_rng(2)
    theta = rng.normal(size=(5, 4))
    a = [rng.integers(0, 4, size=5).tolist() for _ in range(3)]
    b = [rng.integers(0, 4, size=9).tolist() for _ in range(4)]
    na, nb = sum(map(len, a)), sum(map(len, b))
    mean_nll = (na * math.log(perplexity(theta, a)) + nb * math.log(perplexity(theta, b))) / (na + nb)
    assert math.log(perplexity(theta, a + b)) == pytest.approx(mean_nll, rel=1e-13)


def test_reward_value_delegates():
    rng = np.random.default_rng(3)
    theta, w = rng.normal(size=(2, 5, 4))
    rho = rng.dirichlet(np.ones(5))
    assert reward_value(theta, w, rho) == pa_objective(theta, w, rho)
    assert reward_value(theta, np.full((5, 4), 1.5), rho) == pytest.approx(1.5, abs=1e-14)
