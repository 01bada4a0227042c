"""How unlearning a sample moves the alignment objective.

First-order estimate at the original optimum (small unlearning weight w):

    dJ ~= -(w / (2 lam)) * grad J(theta*) . grad l(x; theta*)
        = -(w / (2 lam)) * |grad J| * |grad l| * cos(phi)

The sign is set by cos(phi) alone and the size is linear in w. The oracle
``true_delta_j`` measures the same quantity by actually solving the inner
problem and differencing J.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .errors import InvalidInputError
from .forget import ForgetLoss, InnerConfig, InnerProblem
from .io import rng_stream, write_csv
from .policy import validate_seq, vocab_of
from .reward import pa_grad, pa_objective, token_rewards

NORM_EPS = 1e-15
ORACLE_TOL = 1e-11

IMPACT_HEADER = ["index", "delta_j_est", "delta_j_true", "grad_j_norm", "grad_l_norm", "cos_phi", "low_frac"]
GROUPS_HEADER = ["group", "low_frac", "delta_j_true", "delta_j_true_per_sample"]


def cosine(a, b):
    """Cosine similarity; 0 when either vector has norm below 1e-15."""
    a, b = np.ravel(a), np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _grads(sample, theta_star, reward, rho, loss):
    gj = pa_grad(theta_star, reward, rho)
    gl = InnerProblem([sample], theta_star, loss or ForgetLoss()).candidate_grads(theta_star)[0]
    return gj, gl


def estimate_delta_j(sample, omega, theta_star, reward, rho, loss=None, lam=1.0):
    if omega < 0:
        raise InvalidInputError("omega must be >= 0")
    gj, gl = _grads(sample, theta_star, reward, rho, loss)
    return float(-(omega / (2.0 * lam)) * (gj @ gl))


def decompose(sample, theta_star, reward, rho, loss=None):
    """(|grad J|, |grad l|, cos phi) at theta*."""
    gj, gl = _grads(sample, theta_star, reward, rho, loss)
    return float(np.linalg.norm(gj)), float(np.linalg.norm(gl)), cosine(gj, gl)


def low_reward_fraction(sample, reward, threshold):
    """Share of the sample's tokens whose reward lies strictly below ``threshold``."""
    r = token_rewards(reward, sample)
    return float(np.mean(r < threshold))


def mean_token_reward(pool, reward):
    """Mean reward over every token of every sequence in the pool."""
    if len(pool) == 0:
        raise InvalidInputError("empty pool")
    return float(np.concatenate([token_rewards(reward, s) for s in pool]).mean())


def _as_group(sample_or_group, vocab):
    if len(sample_or_group) and np.ndim(sample_or_group[0]) == 0:
        return [validate_seq(sample_or_group, vocab).tolist()]
    return list(sample_or_group)


def true_delta_j(sample_or_group, omega, theta_star, reward, rho, loss=None, cfg=None,
                 per_sample=False, tol=ORACLE_TOL):
    """J(theta*(w)) - J(theta*) with the inner problem solved to ``tol``.

    The group carries total mass ``omega`` split uniformly, or ``omega`` on
    every member when ``per_sample`` is set.
    """
    if omega < 0:
        raise InvalidInputError("omega must be >= 0")
    if omega == 0:
        return 0.0
    group = _as_group(sample_or_group, vocab_of(theta_star))
    cfg = cfg or InnerConfig()
    inner = InnerProblem(group, theta_star, loss, cfg)
    w = np.full(len(group), omega if per_sample else omega / len(group))
    sol = inner.solve(w, tol=tol)
    return pa_objective(sol.theta, reward, rho) - pa_objective(theta_star, reward, rho)


@dataclass
class ImpactRecord:
    index: int
    delta_j_est: float
    delta_j_true: float | None
    grad_j_norm: float
    grad_l_norm: float
    cos_phi: float
    low_frac: float

    def row(self):
        return [self.index, self.delta_j_est, self.delta_j_true, self.grad_j_norm, self.grad_l_norm,
                self.cos_phi, self.low_frac]


def impact_report(pool, omega, theta_star, reward, rho, loss=None, cfg=None, oracle=True, threshold=None):
    """Per-sample estimate, decomposition, low-reward share and (optionally) the re-solve oracle."""
    cfg = cfg or InnerConfig()
    if threshold is None:
        threshold = mean_token_reward(pool, reward)
    gj = pa_grad(theta_star, reward, rho)
    grads = InnerProblem(pool, theta_star, loss, cfg).candidate_grads(theta_star)
    gj_norm = float(np.linalg.norm(gj))
    out = []
    for i, s in enumerate(pool):
        gl = grads[i]
        est = float(-(omega / (2.0 * cfg.lam)) * (gj @ gl))
        true = true_delta_j(s, omega, theta_star, reward, rho, loss, cfg) if oracle else None
        out.append(ImpactRecord(i, est, true, gj_norm, float(np.linalg.norm(gl)), cosine(gj, gl),
                                low_reward_fraction(s, reward, threshold)))
    return out


@dataclass
class GroupRecord:
    group: int
    members: list
    low_frac: float
    delta_j_true: float
    delta_j_true_per_sample: float

    def row(self):
        return [self.group, self.low_frac, self.delta_j_true, self.delta_j_true_per_sample]


@dataclass
class GroupExperiment:
    records: list
    threshold: float
    spearman: float
    summary: dict = field(default_factory=dict)


def group_impact_experiment(pool, theta_star, reward, rho, groups=40, group_size=8, omega=1.0,
                            loss=None, cfg=None, seed=0):
    """Random groups of the pool, each unlearned on its own.

    Members of a group are distinct; groups are drawn independently. The
    low-reward threshold is the pool's mean token reward. Two weightings are
    measured per group: total mass ``omega`` spread uniformly, and ``omega``
    on every member.
    """
    if groups < 1 or group_size < 1:
        raise InvalidInputError("groups and group_size must be >= 1")
    if group_size > len(pool):
        raise InvalidInputError(f"group_size {group_size} exceeds pool size {len(pool)}")
    threshold = mean_token_reward(pool, reward)
    rng = rng_stream(seed, "groups")
    records = []
    for gi in range(groups):
        members = sorted(int(i) for i in rng.choice(len(pool), size=group_size, replace=False))
        seqs = [pool[i] for i in members]
        toks = np.concatenate([token_rewards(reward, s) for s in seqs])
        frac = float(np.mean(toks < threshold))
        dj = true_delta_j(seqs, omega, theta_star, reward, rho, loss, cfg)
        dj_each = true_delta_j(seqs, omega, theta_star, reward, rho, loss, cfg, per_sample=True)
        records.append(GroupRecord(gi, members, frac, dj, dj_each))
    fr = np.array([r.low_frac for r in records])
    dj = np.array([r.delta_j_true for r in records])
    if len(records) > 1 and np.ptp(fr) > 0 and np.ptp(dj) > 0:
        rho_s = float(spearmanr(fr, dj).statistic)
    else:
        rho_s = float("nan")
    summary = {
        "groups": groups,
        "group_size": group_size,
        "threshold": threshold,
        "spearman": rho_s,
        "n_positive": int(np.sum(dj > 0)),
        "n_negative": int(np.sum(dj < 0)),
    }
    return GroupExperiment(records, threshold, rho_s, summary)


def write_impact_csv(path, records):
    write_csv(path, IMPACT_HEADER, [r.row() for r in records])


def write_groups_csv(path, records):
    write_csv(path, GROUPS_HEADER, [r.row() for r in records])
