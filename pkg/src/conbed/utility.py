"""Design utilities: contrastive EIG surrogate, EPIG, cost normalisation and sPCE.

Node utilities are objects with ``draw_noise(rng, batch_shape)`` and
``__call__(x, summary, noise)``.  Noise arrays carry the node batch shape as
leading axes, so a utility is a deterministic function of the designs once its
noise has been drawn, and extra leading axes (e.g. finite-difference perturbations)
broadcast through.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .mixture import logsumexp, predictive_moments

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-8


@dataclass
class UtilityConfig:
    L: int = 32
    n_theta0: int = 20
    n_y: int = 20
    n_epig_y: int = 20
    w: float = 0.0
    gamma: float = 0.8
    temperature: float = 0.5
    composition: str = "product"  # or "paired" (n_theta0 draws, one outcome each)

    def __post_init__(self):
        for name in ("L", "n_theta0", "n_y", "n_epig_y"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.w < 0:
            raise ValueError("w must be nonnegative")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.composition not in ("product", "paired"):
            raise ValueError("composition must be 'product' or 'paired'")


def _gauss(rng, shape):
    return rng.standard_normal(shape)


class AceUtility:
    """Contrastive EIG surrogate with the amortized (or exact) posterior as proposal."""

    def __init__(self, belief, cfg: UtilityConfig):
        self.belief = belief
        self.task = belief.task
        self.cfg = cfg
        self.n_clamped = 0

    def _outer(self):
        c = self.cfg
        return (c.n_theta0, c.n_y) if c.composition == "product" else (c.n_theta0, 1)

    def draw_noise(self, rng, batch_shape=()):
        batch_shape = tuple(batch_shape)
        n0, ny = self._outer()
        k, d, L = self.belief.n_components, self.belief.latent_dim, self.cfg.L
        return {
            "g0": rng.gumbel(size=batch_shape + (n0, k)),
            "e0": _gauss(rng, batch_shape + (n0, k, d)),
            "ey": self.task.sample_noise(rng, batch_shape + (n0, ny)),
            "gl": rng.gumbel(size=batch_shape + (n0, ny, L, k)),
            "el": _gauss(rng, batch_shape + (n0, ny, L, k, d)),
        }

    def terms(self, x, summary, noise):
        """Per-outer-sample log ratios, shape ``batch + (n_theta0, n_y)``."""
        b, task, tau = self.belief, self.task, self.cfg.temperature
        x = np.asarray(x, dtype=float)
        q = b.posterior(summary)
        th0 = q.unsqueeze(1).sample_reparam(noise["g0"], noise["e0"], tau)
        p0 = b.to_param(th0)
        y = task.simulate(p0[..., :, None, :], x[..., None, None, :], noise["ey"])
        q1 = b.posterior(b.extend(b.expand(summary, 2), x[..., None, None, :], y))
        thl = q1.unsqueeze(1).sample_reparam(noise["gl"], noise["el"], tau)
        th0b = np.broadcast_to(th0[..., :, None, None, :], thl.shape[:-2] + (1, thl.shape[-1]))
        th_all = np.concatenate([th0b, thl], axis=-2)
        log_q0 = q.unsqueeze(3).log_prob(th_all)
        log_q1 = q1.unsqueeze(1).log_prob(th_all)
        ll = task.loglik(y[..., None], x[..., None, None, None, :], b.to_param(th_all))
        den = logsumexp(log_q0 + ll - log_q1, axis=-1) - math.log(th_all.shape[-2])
        out = ll[..., 0] - den
        bad = ~np.isfinite(out)
        if np.any(bad):
            self.n_clamped += int(bad.sum())
            log.warning("ace_eig: clamped %d non-finite log-ratio terms", int(bad.sum()))
            out = np.where(bad, 0.0, out)
        return out

    def __call__(self, x, summary, noise):
        t = self.terms(x, summary, noise)
        return t.mean(axis=(-2, -1))


def ace_eig(x, summary, belief, cfg: UtilityConfig, rng, return_se: bool = False):
    """One-shot estimate at design(s) ``x`` given a history summary."""
    util = AceUtility(belief, cfg)
    x = np.asarray(x, dtype=float)
    noise = util.draw_noise(rng, x.shape[:-1])
    t = util.terms(x, summary, noise)
    est = t.mean(axis=(-2, -1))
    if not return_se:
        return est
    n = t.shape[-1] * t.shape[-2]
    se = t.reshape(t.shape[:-2] + (n,)).std(axis=-1, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(est)
    return est, se


class ExactEigUtility:
    """Enumerated one-step EIG for finite-support tasks (planner oracle checks)."""

    def __init__(self, belief):
        self.belief = belief
        self.task = belief.task

    def draw_noise(self, rng, batch_shape=()):
        return {}

    def __call__(self, x, summary, noise):
        return self.task.exact_eig(x, summary[0])


class EpigUtility:
    """EPIG with moment-matched Gaussian entropies, summed over a fixed target set."""

    def __init__(self, belief, targets, cfg: UtilityConfig):
        if belief.target_kind != "predictive":
            raise ValueError("EPIG requires a predictive belief")
        self.belief = belief
        self.task = belief.task
        self.cfg = cfg
        self.targets = np.asarray(targets, dtype=float)
        self._tq = belief.net.query_features(self.targets)

    def draw_noise(self, rng, batch_shape=()):
        batch_shape = tuple(batch_shape)
        k = self.belief.n_components
        ny = self.cfg.n_epig_y
        return {"g": rng.gumbel(size=batch_shape + (ny, k)), "e": _gauss(rng, batch_shape + (ny, k, 1))}

    def __call__(self, x, summary, noise):
        b = self.belief
        x = np.asarray(x, dtype=float)
        qx = b.predictive(summary, x)
        y = qx.unsqueeze(1).sample_reparam(noise["g"], noise["e"], self.cfg.temperature)[..., 0]
        s0 = b.expand(summary, 1)
        s1 = b.extend(s0, x[..., None, :], y)
        _, v0 = predictive_moments(b.predictive(s0, query_pre=self._tq))
        _, v1 = predictive_moments(b.predictive(b.expand(s1, 1), query_pre=self._tq))
        h0 = 0.5 * np.log(np.maximum(v0, VAR_FLOOR)).sum(-1)
        h1 = 0.5 * np.log(np.maximum(v1, VAR_FLOOR)).sum(-1).mean(-1)
        return h0 - h1


class PredictiveStdUtility:
    """Predictive standard deviation at the design (uncertainty sampling with the network)."""

    def __init__(self, belief):
        self.belief = belief
        self.task = belief.task

    def draw_noise(self, rng, batch_shape=()):
        return {}

    def __call__(self, x, summary, noise):
        _, v = predictive_moments(self.belief.predictive(summary, np.asarray(x, dtype=float)))
        return np.sqrt(np.maximum(v, VAR_FLOOR))


def epig(x, summary, belief, targets, cfg: UtilityConfig, rng):
    util = EpigUtility(belief, targets, cfg)
    x = np.asarray(x, dtype=float)
    return util(x, summary, util.draw_noise(rng, x.shape[:-1]))


def cost_normalized_utility(utilities, costs, w: float, gamma: float):
    """Discounted utility over one plus the weighted discounted cost (last axis = depth)."""
    u = np.asarray(utilities, dtype=float)
    c = np.asarray(costs, dtype=float)
    disc = gamma ** np.arange(u.shape[-1])
    return np.sum(disc * u, axis=-1) / (1.0 + w * np.sum(disc * c, axis=-1))


def spce(task, xs, ys, theta_true, L: int, rng, chunk: int = 20000) -> float:
    """Prior-contrastive lower bound on the information a trajectory carries about theta."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) == 0:
        return 0.0

    def log_f(theta):
        theta = np.asarray(theta, dtype=float)
        total = 0.0
        for x, y in zip(xs, ys):
            total = total + task.loglik(y, x, theta)
        return total

    lf_true = float(log_f(theta_true))
    acc = lf_true
    done = 0
    while done < L:
        n = min(chunk, L - done)
        lf = log_f(task.prior_sample(rng, n))
        acc = float(np.logaddexp(acc, logsumexp(lf)))
        done += n
    return lf_true - (acc - math.log(L + 1))


def mean_ci(values, level: float = 0.95):
    """Mean and Student-t confidence half-width."""
    from scipy import stats

    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    if len(v) < 2:
        return m, float("nan")
    half = float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))
    return m, half

