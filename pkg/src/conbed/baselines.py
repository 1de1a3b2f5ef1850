"""Gaussian-process baselines for cost-aware active learning and a random design policy.

The GP is a zero-mean regression model with a constant-scaled RBF kernel and a tiny
fixed observation noise.  Kernel scale and lengthscale are refitted by maximum
marginal likelihood at every step.  Acquisitions are maximised after dividing by
``1 + lambda * cost`` inside the current feasible set.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from . import constraints as cons
from .errors import InvalidInputError
from .optim import SolverConfig, solve

log = logging.getLogger(__name__)

ALPHA = 1e-8
MAX_JITTER = 1e-6
HYPER_BOUNDS = (1e-2, 1e2)
VAR_FLOOR = 1e-12
ACQUISITIONS = ("us", "vr", "epig", "rs")


def rbf(a, b, scale: float, lengthscale: float):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d2 = np.sum((a[..., :, None, :] - b[..., None, :, :]) ** 2, axis=-1)
    return scale * np.exp(-0.5 * d2 / lengthscale**2)


def _cholesky(K):
    """Cholesky of ``K`` with jitter escalated up to ``MAX_JITTER``."""
    jitter = 0.0
    eye = np.eye(len(K))
    while True:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise


@dataclass(frozen=True)
class GpModel:
    X: np.ndarray
    y: np.ndarray
    scale: float = 1.0
    lengthscale: float = 1.0
    alpha: float = ALPHA
    chol: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    jitter: float = 0.0

    @classmethod
    def build(cls, X, y, scale=1.0, lengthscale=1.0, alpha=ALPHA) -> "GpModel":
        X = np.asarray(X, dtype=float).reshape(len(y), -1) if len(y) else np.zeros((0, 0))
        y = np.asarray(y, dtype=float)
        if len(y) == 0:
            return cls(X, y, scale, lengthscale, alpha)
        K = rbf(X, X, scale, lengthscale) + alpha * np.eye(len(y))
        L, jitter = _cholesky(K)
        w = cho_solve((L, True), y)
        return cls(X, y, scale, lengthscale, alpha, L, w, jitter)

    @property
    def n(self) -> int:
        return len(self.y)

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            return 0.0
        return float(-0.5 * self.y @ self.weights - np.sum(np.log(np.diag(self.chol))) - 0.5 * self.n * math.log(2 * math.pi))


def gp_fit(X, y, n_starts: int = 5, seed: int = 0, bounds=HYPER_BOUNDS) -> GpModel:
    """Refit scale and lengthscale by multi-start L-BFGS-B on the log marginal likelihood."""
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        return GpModel.build(np.zeros((0, 0)), y)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    lo, hi = np.log(bounds[0]), np.log(bounds[1])

    def nll(p):
        try:
            return -GpModel.build(X, y, math.exp(p[0]), math.exp(p[1])).log_marginal_likelihood()
        except np.linalg.LinAlgError:
            return 1e300

    rng = np.random.default_rng(seed)
    starts = [np.zeros(2)] + [rng.uniform(lo, hi, 2) for _ in range(n_starts - 1)]
    best = None
    for p0 in starts:
        res = minimize(nll, p0, method="L-BFGS-B", bounds=[(lo, hi), (lo, hi)])
        if best is None or res.fun < best.fun:
            best = res
    return GpModel.build(X, y, math.exp(best.x[0]), math.exp(best.x[1]))


def _cross(model: GpModel, x):
    """``L^-1 k(X, x)`` with shape ``(N, n)``."""
    kx = rbf(model.X, x, model.scale, model.lengthscale)
    return solve_triangular(model.chol, kx, lower=True)


def gp_predict(model: GpModel, x):
    """Posterior mean and latent-function variance at each row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if model.n == 0:
        return np.zeros(len(x)), np.full(len(x), model.scale)
    kx = rbf(model.X, x, model.scale, model.lengthscale)
    mean = kx.T @ model.weights
    v = solve_triangular(model.chol, kx, lower=True)
    var = model.scale - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def gp_cov(model: GpModel, xa, xb):
    """Posterior covariance matrix between the latent values at ``xa`` and ``xb``."""
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    prior = rbf(xa, xb, model.scale, model.lengthscale)
    if model.n == 0:
        return prior
    return prior - _cross(model, xa).T @ _cross(model, xb)


def acquisition(model: GpModel, kind: str, x, targets=None, rng=None):
    """Acquisition values at rows of ``x``; ``targets`` are needed for VR and EPIG."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if kind not in ACQUISITIONS:
        raise InvalidInputError(f"unknown acquisition {kind!r}")
    if kind == "rs":
        rng = rng or np.random.default_rng()
        return rng.random(len(x))
    _, var = gp_predict(model, x)
    vy = np.maximum(var + model.alpha, VAR_FLOOR)
    if kind == "us":
        return np.sqrt(vy)
    if targets is None:
        raise InvalidInputError(f"{kind} needs target points")
    cov = gp_cov(model, targets, x)  # (M, n)
    if kind == "vr":
        return np.sum(cov**2, axis=0) / vy
    _, vt = gp_predict(model, targets)
    vty = np.maximum(vt + model.alpha, VAR_FLOOR)
    prod = vty[:, None] * vy[None, :]
    gap = np.maximum(prod - cov**2, VAR_FLOOR)
    return np.mean(0.5 * np.log(prod / gap), axis=0)


def cost_aware_acquire(model: GpModel, kind: str, state: cons.ConstraintState, cost_field, rng,
                       targets=None, cost_weight: float = 1.0, restarts: int = 5, maxiter: int = 100):
    """Maximise ``acq / (1 + cost_weight * cost)`` over the current feasible set."""
    if kind == "rs":
        return cons.sample_feasible(state, rng)
    box = cons.feasible_box(state)

    def score(X):
        X = np.atleast_2d(X)
        a = acquisition(model, kind, X, targets)
        c = cost_field(X) if cost_field is not None else 0.0
        return a / (1.0 + cost_weight * c)

    rows = None
    if state.has_budget or (state.has_transition and state.norm_kind != "inf"):
        def rows(x):
            out = []
            if state.has_transition and state.norm_kind != "inf":
                out.append(state.delta - cons.norm(x - state.anchor, state.norm_kind))
            if state.has_budget:
                out.append(state.remaining_budget - state.cost_model.smooth(x, state.anchor))
            return np.array(out, dtype=float)

    cfg = SolverConfig(maxiter=maxiter)
    best_x, best_f = None, -np.inf
    for _ in range(restarts):
        x0 = cons.sample_feasible(state, rng)
        try:
            res = solve(lambda v: float(score(v)[0]), x0, box.lower, box.upper, ineq=rows, cfg=cfg,
                        objective_batch=score)
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.debug("acquisition restart failed: %s", exc)
            continue
        x = cons.repair(state, res.x)
        f = float(score(x)[0])
        if cons.contains(state, x) and f > best_f:
            best_x, best_f = x, f
    if best_x is None:
        log.warning("all acquisition restarts failed; using the feasible-box centre")
        return cons.repair(state, box.center)
    return best_x


class GpPolicy:
    """GP baseline policy: refit every step, then cost-aware constrained acquisition."""

    def __init__(self, kind: str, cost_field=None, targets=None, seed: int = 0, cost_weight: float = 1.0,
                 restarts: int = 5, maxiter: int = 100):
        if kind not in ACQUISITIONS:
            raise InvalidInputError(f"unknown acquisition {kind!r}")
        self.kind = kind
        self.cost_field = cost_field
        self.targets = None if targets is None else np.asarray(targets, dtype=float)
        self.seed = seed
        self.cost_weight = cost_weight
        self.restarts, self.maxiter = restarts, maxiter
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 21]))
        self.X, self.y = [], []
        self.model = None

    def propose(self, t: int, state):
        if self.kind != "rs":
            self.model = gp_fit(np.array(self.X), np.array(self.y), seed=self.seed + t) if self.y else GpModel.build(
                np.zeros((0, 0)), np.zeros(0))
        x = cost_aware_acquire(self.model, self.kind, state, self.cost_field, self.rng, self.targets,
                               self.cost_weight, self.restarts, self.maxiter)
        return x, {}

    def observe(self, x, y):
        self.X.append(np.asarray(x, dtype=float))
        self.y.append(float(y))


class RandomDesignPolicy:
    """Uniform draws from the current feasible set (BED lower-bound baseline)."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 20]))

    def propose(self, t: int, state):
        return cons.sample_feasible(state, self.rng), {}

    def observe(self, x, y):
        pass


def gp_rmse(X, y, test_x, test_y, seed: int = 0) -> float:
    """RMSE of a freshly fitted GP's mean on held-out points (shared evaluation model)."""
    model = gp_fit(np.asarray(X), np.asarray(y), seed=seed)
    mean, _ = gp_predict(model, test_x)
    return float(np.sqrt(np.mean((mean - np.asarray(test_y)) ** 2)))


def rmse_curve(designs, observations, test_x, test_y, seed: int = 0):
    """RMSE after each prefix of a trajectory (prefix length 0 uses the prior mean)."""
    out = [float(np.sqrt(np.mean(np.asarray(test_y) ** 2)))]
    for n in range(1, len(designs) + 1):
        out.append(gp_rmse(designs[:n], observations[:n], test_x, test_y, seed))
    return out
