"""Per-sample unlearning losses and the weighted inner problem.

Every loss is written against the sample's summed log-likelihood
``L(theta) = sum_t log p(x_t | x_{t-1}; theta)``:

* ``ga``:       l = L
* ``graddiff``: l = L + retain_weight * nll(theta, retain)
* ``npo``:      l = -(2/b) log sigmoid(-b (L - L_ref)),  L_ref = L(theta_star)

Minimizing any of them lowers the sample's likelihood. The inner problem is

    f(theta, w) = sum_i w_i l_i(theta) + lam * ||theta - theta_star||^2
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DivergenceError, InvalidInputError, NumericalError
from .policy import count_tensor, log_softmax, total_counts, vocab_of

KINDS = ("ga", "graddiff", "npo")


@dataclass(frozen=True)
class ForgetLoss:
    kind: str = "ga"
    npo_beta: float = 0.1
    retain_weight: float = 1.0
    retain: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown forget loss {self.kind!r}; expected one of {KINDS}")
        if self.kind == "npo" and not self.npo_beta > 0:
            raise InvalidInputError(f"NPO needs npo_beta > 0, got {self.npo_beta}")
        if self.kind == "graddiff":
            if self.retain_weight < 0:
                raise InvalidInputError("retain_weight must be >= 0")
            if self.retain_weight > 0 and len(self.retain) == 0:
                raise InvalidInputError("graddiff needs a retain split")


@dataclass(frozen=True)
class InnerConfig:
    lam: float = 1.0
    steps: int = 5000
    lr: float = 0.1
    tol: float = 1e-8
    hvp_mode: str = "analytic"

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidInputError(f"lambda must be > 0, got {self.lam}")
        if self.hvp_mode not in ("analytic", "fd"):
            raise InvalidInputError(f"hvp_mode must be 'analytic' or 'fd', got {self.hvp_mode!r}")


class InnerSolution(NamedTuple):
    theta: np.ndarray
    steps: int
    grad_norm: float


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _cov_apply(pi, v):
    """Row-wise (diag(pi_c) - pi_c pi_c^T) v_c."""
    return pi * v - pi * (pi * v).sum(axis=1, keepdims=True)


class InnerProblem:
    """Candidate pool bound to a forget loss, anchor ``theta_star`` and config.

    Weight vectors are always full length ``n``; zero entries are skipped.
    """

    def __init__(self, candidates, theta_star, loss=None, cfg=None):
        self.theta_star = np.array(theta_star, dtype=float)
        self.vocab = vocab_of(self.theta_star)
        self.shape = self.theta_star.shape
        self.loss = loss or ForgetLoss()
        self.cfg = cfg or InnerConfig()
        if len(candidates) == 0:
            raise InvalidInputError("candidate pool is empty")
        self.candidates = list(candidates)
        self.counts = count_tensor(self.candidates, self.vocab)
        self.n_ctx = self.counts.sum(axis=2)
        self.n = len(self.candidates)
        if self.loss.kind == "graddiff":
            if self.loss.retain_weight > 0:
                self.retain_counts = total_counts(self.loss.retain, self.vocab) / len(self.loss.retain)
            else:
                self.retain_counts = np.zeros(self.shape)
            self.retain_n_ctx = self.retain_counts.sum(axis=1)
        if self.loss.kind == "npo":
            self.ref_ll = self.loglik(self.theta_star)
        self.n_grad = 0
        self.n_hvp = 0

    # per-candidate pieces

    def _weights(self, omega):
        w = np.asarray(omega, dtype=float)
        if w.shape != (self.n,):
            raise InvalidInputError(f"weight vector must have length {self.n}, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInputError("weights must be finite and nonnegative")
        return w

    def _index(self, idx):
        return np.arange(self.n) if idx is None else np.asarray(idx, dtype=np.int64)

    def loglik(self, theta, idx=None):
        idx = self._index(idx)
        return np.einsum("kcv,cv->k", self.counts[idx], log_softmax(theta))

    def _retain_nll(self, lsm):
        return -(self.retain_counts * lsm).sum()

    def _npo_margin(self, theta, idx):
        return self.loss.npo_beta * (self.loglik(theta, idx) - self.ref_ll[idx])

    def _grad_coef(self, theta, idx):
        """Scale s_i with grad l_i = s_i grad L_i (+ retain term for graddiff)."""
        if self.loss.kind == "npo":
            return 2.0 * _sigmoid(self._npo_margin(theta, idx))
        return np.ones(len(idx))

    def losses(self, theta, idx=None):
        idx = self._index(idx)
        lsm = log_softmax(theta)
        ll = np.einsum("kcv,cv->k", self.counts[idx], lsm)
        if self.loss.kind == "ga":
            return ll
        if self.loss.kind == "graddiff":
            return ll + self.loss.retain_weight * self._retain_nll(lsm)
        b = self.loss.npo_beta
        return (2.0 / b) * np.logaddexp(0.0, b * (ll - self.ref_ll[idx]))

    def candidate_grads(self, theta, idx=None):
        """Gradients of l_i for the selected candidates, shape ``(k, d)``."""
        idx = self._index(idx)
        pi = np.exp(log_softmax(theta))
        g = self.counts[idx] - self.n_ctx[idx][:, :, None] * pi[None]
        g *= self._grad_coef(theta, idx)[:, None, None]
        if self.loss.kind == "graddiff":
            g += self.loss.retain_weight * (self.retain_n_ctx[:, None] * pi - self.retain_counts)
        return g.reshape(len(idx), -1)

    # weighted inner objective

    def objective(self, omega, theta):
        w = self._weights(omega)
        act = np.flatnonzero(w)
        val = w[act] @ self.losses(theta, act) if act.size else 0.0
        return float(val + self.cfg.lam * np.sum((theta - self.theta_star) ** 2))

    def gradient(self, omega, theta):
        self.n_grad += 1
        return self._gradient(self._weights(omega), np.reshape(theta, self.shape)).ravel()

    def _gradient(self, w, theta, act=None, fixed=None):
        """Unvalidated gradient; ``fixed`` caches the theta-independent pieces for ga/graddiff."""
        grad = 2.0 * self.cfg.lam * (theta - self.theta_star)
        act = np.flatnonzero(w) if act is None else act
        if act.size == 0:
            return grad
        pi = np.exp(log_softmax(theta))
        if fixed is None:
            fixed = self._fixed_part(w, act) if self.loss.kind != "npo" else None
        if fixed is not None:
            ca, n_a = fixed
        else:
            a = w[act] * self._grad_coef(theta, act)
            ca = np.einsum("k,kcv->cv", a, self.counts[act])
            n_a = ca.sum(axis=1, keepdims=True)
        return grad + ca - n_a * pi

    def _fixed_part(self, w, act):
        """Weighted counts and context totals, with the graddiff retain term folded in."""
        ca = np.einsum("k,kcv->cv", w[act], self.counts[act])
        n_a = ca.sum(axis=1, keepdims=True)
        if self.loss.kind == "graddiff":
            r = w[act].sum() * self.loss.retain_weight
            ca = ca - r * self.retain_counts
            n_a = n_a - r * self.retain_n_ctx[:, None]
        return ca, n_a

    def hvp(self, omega, theta, v, mode=None):
        """(sum_i w_i hess l_i + 2 lam I) v."""
        mode = mode or self.cfg.hvp_mode
        theta = np.reshape(theta, self.shape)
        v = np.asarray(v, dtype=float).ravel()
        if mode == "fd":
            out = self._hvp_fd(omega, theta, v)
        else:
            out = self._hvp_analytic(omega, theta, v)
        if not np.all(np.isfinite(out)):
            raise NumericalError("Hessian-vector product is not finite")
        return out

    def _hvp_analytic(self, omega, theta, v):
        self.n_hvp += 1
        return self.hessian_operator(omega, theta)(v)

    def hessian_operator(self, omega, theta):
        """v -> (sum_i w_i hess l_i + 2 lam I) v with every theta-dependent piece precomputed."""
        w = self._weights(omega)
        theta = np.reshape(theta, self.shape)
        two_lam = 2.0 * self.cfg.lam
        act = np.flatnonzero(w)
        if act.size == 0:
            return lambda v: two_lam * np.asarray(v, dtype=float).ravel()
        pi = np.exp(log_softmax(theta))
        a = w[act] * self._grad_coef(theta, act)
        # row scale of the covariance term: -(weighted context counts) (+ retain counts)
        scale = -np.einsum("k,kc->c", a, self.n_ctx[act])
        if self.loss.kind == "graddiff":
            scale = scale + w[act].sum() * self.loss.retain_weight * self.retain_n_ctx
        scale = scale[:, None]
        low_rank = None
        if self.loss.kind == "npo":
            b = self.loss.npo_beta
            sig = _sigmoid(self._npo_margin(theta, act))
            gl = (self.counts[act] - self.n_ctx[act][:, :, None] * pi[None]).reshape(len(act), -1)
            low_rank = (gl, w[act] * 2.0 * b * sig * (1.0 - sig))

        def apply(v):
            vm = np.asarray(v, dtype=float).reshape(self.shape)
            out = (two_lam * vm + scale * _cov_apply(pi, vm)).ravel()
            if low_rank is not None:
                gl, coef = low_rank
                out = out + gl.T @ (coef * (gl @ vm.ravel()))
            return out

        return apply

    def _hvp_fd(self, omega, theta, v):
        vn = np.linalg.norm(v)
        if vn == 0:
            return np.zeros_like(v)
        h = 1e-5 * (1.0 + np.linalg.norm(theta)) / max(vn, 1e-12)
        self.n_hvp += 1
        vm = v.reshape(self.shape)
        return (self.gradient(omega, theta + h * vm) - self.gradient(omega, theta - h * vm)) / (2 * h)

    def curvature_bound(self, omega, theta, iters=50):
        """Largest eigenvalue of ``-sum_i w_i hess l_i`` by power iteration.

        A first pass finds the spectral radius r; a second pass on the shifted
        (PSD) operator isolates the top eigenvalue when the dominant one is
        negative.
        """
        w = self._weights(omega)
        if not np.any(w):
            return 0.0
        two_lam = 2.0 * self.cfg.lam
        h = self.hessian_operator(w, theta)

        def apply_m(x):
            self.n_hvp += 1
            return two_lam * x - h(x)

        x = np.random.default_rng(0).standard_normal(int(np.prod(self.shape)))
        x /= np.linalg.norm(x)
        rq = 0.0
        for _ in range(iters):
            y = apply_m(x)
            rq = float(x @ y)
            ny = np.linalg.norm(y)
            if ny == 0:
                return 0.0
            x = y / ny
        if rq >= 0:
            return rq
        radius = abs(rq)
        x = np.random.default_rng(1).standard_normal(x.size)
        x /= np.linalg.norm(x)
        top = 0.0
        for _ in range(iters):
            y = apply_m(x) + radius * x
            top = float(x @ y)
            x = y / np.linalg.norm(y)
        return top - radius

    def solve(self, omega, theta0=None, tol=None, max_steps=None):
        """Gradient descent on ``f(., omega)`` warm-started at ``theta0``."""
        w = self._weights(omega)
        tol = self.cfg.tol if tol is None else tol
        max_steps = self.cfg.steps if max_steps is None else max_steps
        theta = np.array(self.theta_star if theta0 is None else theta0, dtype=float).reshape(self.shape)
        act = np.flatnonzero(w)
        fixed = self._fixed_part(w, act) if act.size and self.loss.kind != "npo" else None
        gn = np.inf
        for step in range(max_steps + 1):
            g = self._gradient(w, theta, act, fixed)
            self.n_grad += 1
            gn = float(np.linalg.norm(g))
            if not np.isfinite(gn):
                raise DivergenceError("inner solve", step, gn)
            if gn < tol or step == max_steps:
                return InnerSolution(theta, step, gn)
            theta = theta - self.cfg.lr * g.reshape(self.shape)
        raise AssertionError("unreachable")


def forget_loss(loss, theta, sample, theta_star):
    return float(InnerProblem([sample], theta_star, loss).losses(np.asarray(theta, dtype=float))[0])


def forget_grad(loss, theta, sample, theta_star):
    return InnerProblem([sample], theta_star, loss).candidate_grads(np.asarray(theta, dtype=float))[0]


def reg_loss(theta, theta_star):
    theta, theta_star = np.asarray(theta, dtype=float), np.asarray(theta_star, dtype=float)
    if theta.shape != theta_star.shape:
        raise InvalidInputError(f"shape mismatch {theta.shape} vs {theta_star.shape}")
    return float(np.sum((theta - theta_star) ** 2))


def reg_grad(theta, theta_star):
    theta, theta_star = np.asarray(theta, dtype=float), np.asarray(theta_star, dtype=float)
    if theta.shape != theta_star.shape:
        raise InvalidInputError(f"shape mismatch {theta.shape} vs {theta_star.shape}")
    return (2.0 * (theta - theta_star)).ravel()
