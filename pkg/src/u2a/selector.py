"""Greedy construction of the unlearning set (matching-pursuit style).

Iteration t optimizes the weights on the current support S^t, records
g(w^{t,*}), stops early once the last added atom improved g by at most
``delta``, and otherwise adds the candidate whose marginal gain (data term
of dg/dw_k at w_k = 0) is best. A final pass drops atoms sitting on the
weight floor and re-optimizes on what remains.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .bilevel import (
    CGConfig,
    Counters,
    OuterConfig,
    WeightVector,
    data_terms,
    optimize_on_support,
    outer_objective,
    simplex_project,
)
from .errors import ExhaustedError, InvalidInputError
from .forget import InnerConfig
from .io import rng_stream

log = logging.getLogger(__name__)

FORMAT = "u2a-run-v1"
TRACE_HEADER = ["iter", "g", "J", "selected", "cg_iters", "damped", "inner_steps", "ms"]


@dataclass(frozen=True)
class U2AConfig:
    T: int = 100
    delta: float = 0.01
    seed: int = 0
    gain_sign: str = "min"
    inner: InnerConfig = field(default_factory=InnerConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    cg: CGConfig = field(default_factory=CGConfig)

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInputError("T must be >= 1")
        if not self.delta >= 0:
            raise InvalidInputError("delta must be >= 0")
        if self.gain_sign not in ("min", "max"):
            raise InvalidInputError("gain_sign must be 'min' or 'max'")


@dataclass
class IterRecord:
    iter: int
    g: float
    J: float
    selected: int | None
    cg_iters: int
    damped: bool
    inner_steps: int
    ms: float
    omega: np.ndarray
    gains: np.ndarray  # data term of dg/dw_i for every candidate at w^{t,*}


@dataclass
class U2ARun:
    selected: list
    weights: WeightVector
    theta_final: np.ndarray
    trace: list
    stop_reason: str
    g_final: float
    J_final: float
    counters: Counters
    picked: list  # every selection in order, including atoms later dropped

    def to_json(self, config=None):
        return {
            "format": FORMAT,
            "config": config or {},
            "selected": [int(i) for i in self.selected],
            "picked": [int(i) for i in self.picked],
            "weights": self.weights.omega.tolist(),
            "support": list(self.weights.support),
            "stop_reason": self.stop_reason,
            "g_final": self.g_final,
            "J_final": self.J_final,
            "counters": {
                "cg_iters": self.counters.cg_iters,
                "cg_solves": self.counters.cg_solves,
                "inner_steps": self.counters.inner_steps,
                "outer_steps": self.counters.outer_steps,
                "damped": self.counters.damped,
            },
            "trace": [
                {"iter": r.iter, "g": r.g, "J": r.J, "selected": r.selected, "cg_iters": r.cg_iters,
                 "damped": r.damped, "inner_steps": r.inner_steps}
                for r in self.trace
            ],
            "theta_final": self.theta_final.tolist(),
        }

    def trace_rows(self):
        return [[r.iter, r.g, r.J, r.selected, r.cg_iters, r.damped, r.inner_steps, r.ms] for r in self.trace]


def marginal_gains(weights, theta_opt, bl, counters=None):
    """Data term of dg/dw_k for every candidate outside the support.

    Returns ``(indices, gains)``. The sparsity term is left out: it is
    +inf for every w_k = 0 and so does not discriminate between candidates.
    """
    dt = data_terms(weights.omega, theta_opt, bl, counters)
    outside = np.setdiff1d(np.arange(bl.n), weights.support)
    return outside, dt.grads[outside]


def select_next(gains, sign="min"):
    """Position of the best gain; ties go to the lowest position."""
    gains = np.asarray(gains, dtype=float)
    if gains.size == 0:
        raise ExhaustedError("no candidates left outside the support")
    return int(np.argmin(gains) if sign == "min" else np.argmax(gains))


def add_atom(weights, k):
    """Put weight 1 on the new atom and re-project the support onto the simplex."""
    support = tuple(weights.support) + (int(k),)
    raw = np.array([weights.omega[i] for i in weights.support] + [1.0])
    omega = np.zeros_like(weights.omega)
    omega[list(support)] = simplex_project(raw)
    return WeightVector(omega, support)


def optimize_after_add(prev, prev_g, k, theta, bl):
    """Weight optimization on the support S + {k}.

    Starts from the re-projected vector; if that run ends above the previous
    optimum, a second start at the previous optimum (new atom on the floor)
    is tried and the better result is kept. Both are feasible points of the
    same support face.
    """
    res = optimize_on_support(add_atom(prev, k), bl, theta)
    if prev_g is not None and res.g > prev_g:
        omega = prev.omega.copy()
        omega[k] = bl.outer.omega_floor
        alt = optimize_on_support(WeightVector(omega, tuple(prev.support) + (int(k),)), bl, theta)
        alt.counters.add(res.counters)
        if alt.g <= res.g:
            return alt
        res.counters.add(alt.counters)
    return res


def _finalize(weights, theta, bl, counters):
    floor = bl.outer.omega_floor
    keep = [i for i in weights.support if weights.omega[i] > floor]
    if not keep:
        keep = [int(max(weights.support, key=lambda i: weights.omega[i]))]
    omega = np.zeros(bl.n)
    omega[keep] = weights.omega[keep] / weights.omega[keep].sum()
    res = optimize_on_support(WeightVector(omega, tuple(keep)), bl, theta)
    counters.add(res.counters)
    return res


def run_u2a(bl, cfg=None):
    cfg = cfg or U2AConfig()
    n = bl.n
    counters = Counters()
    first = int(rng_stream(cfg.seed, "u2a-init").integers(n))
    weights = WeightVector.onehot(n, first)
    picked = [first]
    theta = bl.inner.theta_star
    trace = []
    prev_g = None
    prev_weights = None
    stop = "max-iters"
    for t in range(1, cfg.T + 1):
        t0 = time.perf_counter()
        it = Counters()
        if prev_weights is None:
            res = optimize_on_support(weights, bl, theta)
        else:
            res = optimize_after_add(prev_weights, prev_g, picked[-1], theta, bl)
        it.add(res.counters)
        weights, theta, g = res.weights, res.theta, res.g
        dt = data_terms(weights.omega, theta, bl, it)
        rec = IterRecord(t, g, bl.J(theta), None, it.cg_iters, it.damped, it.inner_steps, 0.0,
                         weights.omega.copy(), dt.grads.copy())
        trace.append(rec)
        counters.add(it)
        if prev_g is not None and prev_g - g <= cfg.delta:
            stop = "early-stop"
            rec.ms = (time.perf_counter() - t0) * 1e3
            break
        if t == cfg.T:
            rec.ms = (time.perf_counter() - t0) * 1e3
            break
        outside = np.setdiff1d(np.arange(n), weights.support)
        if outside.size == 0:
            stop = "exhausted"
            rec.ms = (time.perf_counter() - t0) * 1e3
            break
        k = int(outside[select_next(dt.grads[outside], cfg.gain_sign)])
        rec.selected = k
        picked.append(k)
        prev_weights, prev_g = weights, g
        weights = add_atom(weights, k)
        rec.ms = (time.perf_counter() - t0) * 1e3
        log.debug("iter %d: g=%.6f J=%.6f add %d", t, g, rec.J, k)

    final = _finalize(weights, theta, bl, counters)
    kept = set(final.weights.support)
    selected = [i for i in picked if i in kept]
    run = U2ARun(selected, final.weights, final.theta, trace, stop, final.g, bl.J(final.theta), counters, picked)
    log.info("u2a: %s after %d iterations, |S|=%d, g=%.6f", stop, len(trace), len(selected), final.g)
    return run


def replay_stop_reason(trace, delta, T):
    for a, b in zip(trace, trace[1:]):
        if a.g - b.g <= delta:
            return "early-stop"
    return "max-iters" if trace[-1].iter == T else "exhausted"


# Oracles on tiny pools


def best_subset(bl, theta0=None):
    """Exhaustive search over all non-empty subsets, weights optimized per subset."""
    from itertools import combinations

    n = bl.n
    best = None
    table = {}
    for m in range(1, n + 1):
        for sub in combinations(range(n), m):
            omega = np.zeros(n)
            omega[list(sub)] = 1.0 / m
            res = optimize_on_support(WeightVector(omega, sub), bl, theta0)
            table[sub] = res.g
            if best is None or res.g < best[0]:
                best = (res.g, sub, res.weights)
    return best, table


def add_one_oracle(weights, g, theta, bl):
    """g after actually adding each outside candidate and re-optimizing."""
    outside = np.setdiff1d(np.arange(bl.n), weights.support)
    return outside, np.array([optimize_after_add(weights, g, int(k), theta, bl).g for k in outside])


# Convergence audit


def estimate_smoothness(run):
    """Largest ||grad_a - grad_b|| / ||w_a - w_b|| over trace pairs (data term only)."""
    best = 0.0
    tr = run.trace
    for a in range(len(tr)):
        for b in range(a + 1, len(tr)):
            dw = np.linalg.norm(tr[a].omega - tr[b].omega)
            if dw > 1e-9:
                best = max(best, np.linalg.norm(tr[a].gains - tr[b].gains) / dw)
    return float(best)


@dataclass
class BoundReport:
    g_star: float
    L_hat: float
    eps1: float
    rows: list  # (t, lhs, rhs, ok)
    max_violation_ratio: float

    @property
    def all_ok(self):
        return all(ok for *_, ok in self.rows)


def check_suboptimality_bound(run, g_star, L_hat):
    """Audit g(w^t) - g* <= (8 L + 4 eps1) / (t + 3) along the trace."""
    eps1 = run.trace[0].g - g_star
    rows = []
    worst = 0.0
    for rec in run.trace:
        lhs = rec.g - g_star
        rhs = (8.0 * L_hat + 4.0 * eps1) / (rec.iter + 3)
        ok = lhs <= rhs
        if rhs > 0:
            worst = max(worst, lhs / rhs)
        elif lhs > 0:
            worst = np.inf
        rows.append((rec.iter, lhs, rhs, ok))
    return BoundReport(g_star, L_hat, eps1, rows, worst)
