"""Sequential quadratic programming with finite-difference gradients.

Maximises a smooth objective subject to box bounds and smooth inequalities
``c(x) >= 0``.  Each iteration solves a quadratic subproblem with a damped BFGS
Hessian through the least-distance reformulation (Lawson-Hanson NNLS), then runs a
backtracking line search on the negated objective plus a soft boundary penalty.
Every accepted iterate satisfies the inequalities within ``feasibility_slack``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    ftol: float = 1e-6
    maxiter: int = 600
    fd_eps: float = 1e-4
    feasibility_slack: float = 0.008
    boundary_penalty_weight: float = 1e-3
    max_backtracks: int = 30

    def __post_init__(self):
        for name in ("ftol", "maxiter", "fd_eps", "feasibility_slack"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.boundary_penalty_weight < 0:
            raise ValueError("boundary_penalty_weight must be nonnegative")


@dataclass
class SolveResult:
    x: np.ndarray
    f: float
    status: str  # converged | maxiter | stalled
    n_iter: int = 0
    n_fev: int = 0
    f0: float = float("nan")
    iterates: List[np.ndarray] = field(default_factory=list)


class NonFiniteError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"objective is not finite when perturbing coordinate {index}")
        self.index = index


def _fd_points(x, lower, upper, eps):
    h = np.full_like(x, eps)
    flip = x + h > upper
    h[flip] = -eps
    pts = x[None, :] + np.diag(h)
    return pts, h


def finite_diff_grad(f: Callable, x, eps: float = 1e-4, lower=None, upper=None, f0=None, batch: Optional[Callable] = None):
    """Forward differences; steps that would leave the box are taken backwards instead."""
    x = np.asarray(x, dtype=float)
    lower = np.full_like(x, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full_like(x, np.inf) if upper is None else np.asarray(upper, dtype=float)
    pts, h = _fd_points(x, lower, upper, eps)
    if batch is not None:
        vals = np.asarray(batch(np.vstack([x[None, :], pts])), dtype=float)
        f0, vals = vals[0], vals[1:]
    else:
        f0 = float(f(x)) if f0 is None else f0
        vals = np.array([float(f(p)) for p in pts])
    if not np.isfinite(f0):
        raise NonFiniteError(-1)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NonFiniteError(int(bad[0]))
    return (vals - f0) / h


def _fd_jac(c: Callable, x, eps, lower, upper, c0):
    pts, h = _fd_points(x, lower, upper, eps)
    rows = np.array([c(p) for p in pts])  # (n, m)
    return ((rows - c0[None, :]) / h[:, None]).T


def nnls(E, f, maxiter=None, tol=None):
    """Lawson-Hanson active-set non-negative least squares: min ||E w - f||, w >= 0."""
    m, n = E.shape
    maxiter = 3 * n if maxiter is None else maxiter
    tol = 10 * max(m, n) * np.finfo(float).eps * max(1.0, np.abs(E).max()) if tol is None else tol
    w = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    grad = E.T @ (f - E @ w)
    it = 0
    while (~passive).any() and np.max(np.where(~passive, grad, -np.inf)) > tol:
        j = int(np.argmax(np.where(~passive, grad, -np.inf)))
        passive[j] = True
        while True:
            it += 1
            if it > maxiter:
                raise RuntimeError("nnls did not converge")
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(E[:, passive], f, rcond=None)[0]
            if np.all(z[passive] > 0):
                w = z
                break
            neg = passive & (z <= 0)
            alpha = np.min(w[neg] / (w[neg] - z[neg]))
            w = w + alpha * (z - w)
            passive &= w > tol
            w[~passive] = 0.0
        grad = E.T @ (f - E @ w)
    return w, float(np.linalg.norm(E @ w - f))


def solve_ldp(G, h):
    """min ||u|| s.t. G u >= h. Returns (u, multipliers) or None when infeasible."""
    m, n = G.shape
    if m == 0:
        return np.zeros(n), np.zeros(0)
    E = np.vstack([G.T, h[None, :]])
    e = np.zeros(n + 1)
    e[-1] = 1.0
    scale = max(1.0, float(np.max(np.abs(E))))
    w, _ = nnls(E / scale, e, maxiter=50 * (m + n + 1))
    w = w / scale
    r = E @ w - e
    if np.linalg.norm(r) < 1e-12 or abs(r[-1]) < 1e-14:
        return None
    u = -r[:-1] / r[-1]
    lam = w / (-r[-1])
    return u, lam


def solve_qp(B, g, G, h):
    """min 0.5 p'Bp + g'p s.t. G p >= h via the least-distance reformulation."""
    L = np.linalg.cholesky(B)
    # objective = 0.5 || L' p + L^{-1} g ||^2 + const
    fvec = -np.linalg.solve(L, g)
    Einv_T = np.linalg.inv(L.T)
    Gh = G @ Einv_T
    hh = h - Gh @ fvec
    res = solve_ldp(Gh, hh)
    if res is None:
        return None
    u, lam = res
    p = Einv_T @ (u + fvec)
    return p, lam


def _penalty(x, lower, upper, tau, weight):
    if weight == 0:
        return 0.0, np.zeros_like(x)
    val = 0.0
    grad = np.zeros_like(x)
    lo = np.isfinite(lower)
    hi = np.isfinite(upper)
    if lo.any():
        d = (x[lo] - lower[lo]) / tau[lo]
        val += float(np.sum(tau[lo] * np.logaddexp(0.0, -d)))
        grad[lo] -= expit(-d)
    if hi.any():
        d = (upper[hi] - x[hi]) / tau[hi]
        val += float(np.sum(tau[hi] * np.logaddexp(0.0, -d)))
        grad[hi] += expit(-d)
    return weight * val, weight * grad


def _solve_once(
    objective: Callable,
    x0,
    lower,
    upper,
    ineq: Optional[Callable] = None,
    cfg: Optional[SolverConfig] = None,
    grad: Optional[Callable] = None,
    ineq_jac: Optional[Callable] = None,
    objective_batch: Optional[Callable] = None,
    record_iterates: bool = False,
    max_step: float = np.inf,
) -> SolveResult:
    """One SQP run. ``objective_batch`` (rows -> values) lets finite differences run
    as one call. The returned point is the best feasible iterate, never worse than ``x0``."""
    cfg = cfg or SolverConfig()
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float).copy(), lower, upper)
    n = x.size
    rng_box = np.where(np.isfinite(upper - lower), upper - lower, 1.0)
    tau_max = 0.01 * np.maximum(rng_box, 1e-12)
    n_fev = 0

    def F(v):
        nonlocal n_fev
        n_fev += 1
        return -float(objective(v))

    def gradF(v, fv):
        nonlocal n_fev
        if grad is not None:
            return -np.asarray(grad(v), dtype=float)
        n_fev += n + (1 if objective_batch is not None else 0)
        fb = (lambda X: -np.asarray(objective_batch(X), dtype=float)) if objective_batch is not None else None
        return finite_diff_grad(lambda v_: -float(objective(v_)), v, cfg.fd_eps, lower, upper, f0=fv, batch=fb)

    def cons(v):
        return np.zeros(0) if ineq is None else np.atleast_1d(np.asarray(ineq(v), dtype=float))

    def cjac(v, cv):
        if ineq is None:
            return np.zeros((0, n))
        if ineq_jac is not None:
            return np.atleast_2d(np.asarray(ineq_jac(v), dtype=float))
        return _fd_jac(cons, v, cfg.fd_eps, lower, upper, cv)

    def merit(v, fv, tau):
        return fv + _penalty(v, lower, upper, tau, cfg.boundary_penalty_weight)[0]

    fx = F(x)
    if not np.isfinite(fx):
        raise NonFiniteError(-1)
    f_start = fx
    cx = cons(x)
    if cx.size and np.min(cx) < -cfg.feasibility_slack:
        raise ValueError(f"initial point violates inequality constraints by {-np.min(cx):.3g}")
    g = gradF(x, fx)
    A = cjac(x, cx)
    B = np.eye(n)
    best_x, best_f = x.copy(), fx
    iterates = [x.copy()] if record_iterates else []
    status = "maxiter"
    it = 0
    fin_lo = np.isfinite(lower)
    fin_hi = np.isfinite(upper)
    for it in range(1, cfg.maxiter + 1):
        G_rows = [A, np.eye(n)[fin_lo], -np.eye(n)[fin_hi]]
        h_rows = [-cx, (lower - x)[fin_lo], (x - upper)[fin_hi]]
        if np.isfinite(max_step):
            G_rows += [np.eye(n), -np.eye(n)]
            h_rows += [np.full(n, -max_step), np.full(n, -max_step)]
        G = np.vstack(G_rows)
        h = np.concatenate(h_rows)
        try:
            sol = solve_qp(B, g, G, h)
        except np.linalg.LinAlgError:
            B = np.eye(n)
            sol = solve_qp(B, g, G, h)
        if sol is None:
            # linearisation infeasible: only ask not to worsen violated rows
            h_rel = h.copy()
            h_rel[: len(cx)] = -np.maximum(cx, 0.0)
            sol = solve_qp(B, g, G, h_rel)
            if sol is None:
                status = "stalled"
                break
        p, lam = sol
        lam_c = lam[: len(cx)]
        kkt = abs(float(g @ p)) + float(np.sum(np.abs(lam_c * cx)))
        if kkt < cfg.ftol and np.linalg.norm(p) < cfg.ftol:
            status = "converged"
            break

        # barrier width shrinks with the step so the merit's minimiser tends to the KKT point
        tau = np.minimum(tau_max, max(float(np.max(np.abs(p))), 1e-12))
        m0 = merit(x, fx, tau)
        dm = float((g + _penalty(x, lower, upper, tau, cfg.boundary_penalty_weight)[1]) @ p)
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            xn = np.clip(x + alpha * p, lower, upper)
            cn = cons(xn)
            if cn.size == 0 or np.min(cn) >= -cfg.feasibility_slack:
                fn = F(xn)
                if np.isfinite(fn) and merit(xn, fn, tau) <= m0 + 1e-4 * alpha * min(dm, 0.0):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            if not np.allclose(B, np.eye(n)):
                B = np.eye(n)
                continue
            status = "stalled" if kkt >= cfg.ftol else "converged"
            break

        s = xn - x
        gn = gradF(xn, fn)
        An = cjac(xn, cn)
        lag_old = g - A.T @ lam_c if A.size else g
        lag_new = gn - An.T @ lam_c if An.size else gn
        yv = lag_new - lag_old
        Bs = B @ s
        sBs = float(s @ Bs)
        sy = float(s @ yv)
        if sBs > 1e-300:
            if sy < 0.2 * sBs:
                th = 0.8 * sBs / (sBs - sy)
                yv = th * yv + (1 - th) * Bs
                sy = float(s @ yv)
            if sy > 1e-300:
                B = B - np.outer(Bs, Bs) / sBs + np.outer(yv, yv) / sy
        df = abs(fn - fx)
        x, fx, g, cx, A = xn, fn, gn, cn, An
        if record_iterates:
            iterates.append(x.copy())
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        if df < cfg.ftol and np.linalg.norm(s) < cfg.ftol:
            status = "converged"
            break
    return SolveResult(best_x, -best_f, status, it, n_fev, -f_start, iterates)


def solve(objective, x0, lower, upper, ineq=None, cfg=None, **kw) -> SolveResult:
    """Maximise ``objective`` over the box subject to ``ineq(x) >= 0``.

    Keyword arguments are passed to the iteration (``grad``, ``ineq_jac``,
    ``objective_batch``, ``record_iterates``, ``max_step``).  If the result violated
    the inequalities beyond the slack it is retried once with a halved step cap,
    and otherwise abandoned with status ``stalled`` at ``x0``.
    """
    cfg = cfg or SolverConfig()
    res = _solve_once(objective, x0, lower, upper, ineq, cfg, **kw)
    if ineq is None or np.min(np.atleast_1d(ineq(res.x)), initial=np.inf) >= -cfg.feasibility_slack:
        return res
    width = float(np.max(np.where(np.isfinite(np.asarray(upper) - np.asarray(lower)), np.asarray(upper) - np.asarray(lower), 1.0)))
    kw["max_step"] = 0.5 * min(kw.get("max_step", np.inf), width)
    log.warning("solver result infeasible; retrying from x0 with step cap %.3g", kw["max_step"])
    res = _solve_once(objective, x0, lower, upper, ineq, cfg, **kw)
    if np.min(np.atleast_1d(ineq(res.x)), initial=np.inf) >= -cfg.feasibility_slack:
        return res
    x0 = np.clip(np.asarray(x0, dtype=float), lower, upper)
    return SolveResult(x0, float(objective(x0)), "stalled", res.n_iter, res.n_fev, float(objective(x0)))
