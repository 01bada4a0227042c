"""Outer problem over unlearning weights.

    g(w) = -J(theta*(w)) + beta * sum_i sqrt(w_i),   w on the simplex,

where theta*(w) minimizes the inner problem. Its gradient goes through the
inner optimum by the implicit function theorem:

    dg/dw_i = grad J^T H^{-1} grad l_i + beta / (2 sqrt(w_i)),
    H = sum_i w_i hess l_i + 2 lam I.

H is symmetric, so a single CG solve u = H^{-1} grad J serves every
coordinate: the data term of candidate i is u . grad l_i.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError, PreconditionError, SolverError
from .forget import InnerProblem
from .reward import pa_grad, pa_objective

OMEGA_FLOOR = 1e-12
STATIONARITY_TOL = 1e-6


def simplex_project(v):
    """Euclidean projection onto {x >= 0, sum x = 1} (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0 or not np.all(np.isfinite(v)):
        raise InvalidInputError("simplex_project needs a finite, non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


@dataclass
class WeightVector:
    omega: np.ndarray
    support: tuple

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.support = tuple(int(i) for i in self.support)

    @classmethod
    def from_omega(cls, omega, floor=OMEGA_FLOOR):
        omega = np.asarray(omega, dtype=float)
        return cls(omega, tuple(np.flatnonzero(omega > floor)))

    @classmethod
    def onehot(cls, n, i):
        omega = np.zeros(n)
        omega[i] = 1.0
        return cls(omega, (i,))

    def check(self, floor=OMEGA_FLOOR, atol=1e-10):
        w = self.omega
        if np.any(w < 0):
            raise InvalidInputError("negative weight")
        if abs(w.sum() - 1.0) > atol:
            raise InvalidInputError(f"weights sum to {w.sum()!r}, not 1")
        off = np.ones(w.size, dtype=bool)
        off[list(self.support)] = False
        if np.any(w[off] > floor):
            raise InvalidInputError("mass outside the declared support")
        return self


@dataclass(frozen=True)
class CGConfig:
    tol: float = 1e-8
    max_iters: int = 200

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidInputError("CG tolerance must be > 0")


class CGResult(NamedTuple):
    x: np.ndarray
    iters: int
    residual: float
    damped: bool
    damping: float


def _cg(apply_h, b, tol, max_iters, shift):
    """Plain CG on (H + shift I). Returns (x, iters, ok) where ok=False flags p^T H p <= 0."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    target = (tol * np.linalg.norm(b)) ** 2
    for it in range(1, max_iters + 1):
        hp = apply_h(p) + shift * p
        curv = p @ hp
        if curv <= 0:
            return x, it, False
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * hp
        rs_new = r @ r
        if rs_new <= target:
            return x, it, True
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, max_iters, True


def cg_solve(apply_h, b, cfg=None, damping=None, shift=0.0):
    """Solve H x = b for symmetric H given as a matvec.

    ``damping`` (a float or a zero-argument callable returning one) is the
    diagonal shift applied, with one restart, when CG meets non-positive
    curvature. ``shift`` is applied from the start. The residual contract
    ``||(H + shift) x - b|| <= tol ||b||`` is checked on return.
    """
    cfg = cfg or CGConfig()
    b = np.asarray(b, dtype=float).ravel()
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("right-hand side is not finite")
    bn = np.linalg.norm(b)
    if bn == 0:
        return CGResult(np.zeros_like(b), 0, 0.0, shift > 0, shift)
    damped = shift > 0
    x, iters, ok = _cg(apply_h, b, cfg.tol, cfg.max_iters, shift)
    total = iters
    if not ok:
        if damping is None:
            raise SolverError("non-positive curvature in CG and no damping policy", iters=total)
        mu = damping() if callable(damping) else float(damping)
        shift, damped = shift + mu, True
        x, iters, ok = _cg(apply_h, b, cfg.tol, cfg.max_iters, shift)
        total += iters
        if not ok:
            raise SolverError("non-positive curvature persists after damping", iters=total)
    res = float(np.linalg.norm(apply_h(x) + shift * x - b))
    if res > cfg.tol * bn:
        raise SolverError(f"CG did not converge: residual {res:.3e} > {cfg.tol * bn:.3e}", res, total)
    return CGResult(x, total, res, damped, shift)


@dataclass(frozen=True)
class OuterConfig:
    beta: float = 0.5
    lr: float = 3e-2
    steps: int = 300
    tol: float = 1e-10
    omega_floor: float = OMEGA_FLOOR

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidInputError("beta must be >= 0")
        if not self.lr > 0:
            raise InvalidInputError("outer lr must be > 0")


@dataclass
class Counters:
    cg_iters: int = 0
    cg_solves: int = 0
    inner_steps: int = 0
    outer_steps: int = 0
    damped: bool = False

    def add(self, other):
        self.cg_iters += other.cg_iters
        self.cg_solves += other.cg_solves
        self.inner_steps += other.inner_steps
        self.outer_steps += other.outer_steps
        self.damped |= other.damped


@dataclass
class Bilevel:
    """Everything the outer problem needs, bound together."""

    inner: InnerProblem
    reward: np.ndarray
    rho: np.ndarray
    outer: OuterConfig = field(default_factory=OuterConfig)
    cg: CGConfig = field(default_factory=CGConfig)

    @property
    def n(self):
        return self.inner.n

    @property
    def beta(self):
        return self.outer.beta

    def solve_inner(self, omega, theta0=None, counters=None, tol=None):
        sol = self.inner.solve(omega, theta0, tol=tol)
        if counters is not None:
            counters.inner_steps += sol.steps
        return sol.theta

    def J(self, theta):
        return pa_objective(theta, self.reward, self.rho)


class DataTerms(NamedTuple):
    grads: np.ndarray  # dg/dw_i without the sparsity term, all n candidates
    cg: CGResult
    curvature: float


def _check_stationary(bl, omega, theta):
    gn = np.linalg.norm(bl.inner.gradient(omega, theta))
    if not gn < STATIONARITY_TOL:
        raise PreconditionError(f"theta is not an inner optimum: ||grad f|| = {gn:.3e}")


def data_terms(omega, theta_opt, bl, counters=None):
    """grad J^T H^{-1} grad l_i for every candidate, from one CG solve.

    Before solving, the top eigenvalue B of the forget-loss curvature
    ``-sum w_i hess l_i`` is estimated; if ``2 lam <= B`` the solve runs on
    ``H + (B - 2 lam + 0.1) I`` and the result is flagged as damped.
    """
    omega = np.asarray(omega, dtype=float)
    _check_stationary(bl, omega, theta_opt)
    inner = bl.inner
    gj = pa_grad(theta_opt, bl.reward, bl.rho)
    two_lam = 2.0 * inner.cfg.lam
    bound = inner.curvature_bound(omega, theta_opt)
    shift = bound - two_lam + 0.1 if two_lam <= bound else 0.0

    h = inner.hessian_operator(omega, theta_opt)

    def apply_h(v):
        inner.n_hvp += 1
        return h(v)

    res = cg_solve(apply_h, gj, bl.cg, damping=lambda: max(bound - two_lam, 0.0) + 0.1, shift=shift)
    grads = inner.candidate_grads(theta_opt) @ res.x
    if counters is not None:
        counters.cg_iters += res.iters
        counters.cg_solves += 1
        counters.damped |= res.damped
    return DataTerms(grads, res, bound)


def sparsity_grad(omega, beta):
    return beta / (2.0 * np.sqrt(omega))


def implicit_grad(weights, theta_opt, bl, counters=None):
    """dg/dw_i over the support (same order as ``weights.support``)."""
    dt = data_terms(weights.omega, theta_opt, bl, counters)
    s = list(weights.support)
    return dt.grads[s] + sparsity_grad(weights.omega[s], bl.beta)


def outer_objective(omega, theta_opt, bl, check=True):
    """g = -J(theta) + beta * sum sqrt(w_i); weights at or below the floor count as 0."""
    omega = np.asarray(omega, dtype=float)
    if check:
        _check_stationary(bl, omega, theta_opt)
    live = omega[omega > bl.outer.omega_floor]
    return float(-bl.J(theta_opt) + bl.beta * np.sqrt(live).sum())


class OuterResult(NamedTuple):
    weights: WeightVector
    theta: np.ndarray
    g: float
    g_start: float
    counters: Counters


def _on_support(omega_s, support, n):
    omega = np.zeros(n)
    omega[list(support)] = omega_s
    return omega


def optimize_on_support(weights, bl, theta0=None):
    """Projected gradient descent restricted to ``weights.support``.

    Each step moves along the negative implicit gradient, projects onto the
    simplex of the support, floors entries at ``omega_floor`` and re-solves
    the inner problem from the previous optimum. Off-support coordinates
    stay exactly 0. The best iterate (lowest g, start included) is
    returned, so g never increases relative to the input.
    """
    cfg = bl.outer
    n = bl.n
    support = tuple(weights.support)
    if not support:
        raise InvalidInputError("support must be non-empty")
    counters = Counters()
    omega_s = np.asarray(weights.omega, dtype=float)[list(support)]
    if len(support) == 1:
        omega_s = np.ones(1)
    else:
        omega_s = np.maximum(simplex_project(omega_s), cfg.omega_floor)
    omega = _on_support(omega_s, support, n)
    theta = bl.solve_inner(omega, theta0, counters)
    g = outer_objective(omega, theta, bl)
    g_start = g
    best = (g, omega, theta)
    if len(support) > 1:
        for _ in range(cfg.steps):
            dt = data_terms(omega, theta, bl, counters)
            grad_s = dt.grads[list(support)] + sparsity_grad(omega_s, cfg.beta)
            new_s = np.maximum(simplex_project(omega_s - cfg.lr * grad_s), cfg.omega_floor)
            counters.outer_steps += 1
            moved = np.max(np.abs(new_s - omega_s))
            omega_s = new_s
            omega = _on_support(omega_s, support, n)
            theta = bl.solve_inner(omega, theta, counters)
            g = outer_objective(omega, theta, bl)
            if g < best[0]:
                best = (g, omega, theta)
            if moved < cfg.tol:
                break
    g, omega, theta = best
    return OuterResult(WeightVector(omega, support), theta, g, g_start, counters)
