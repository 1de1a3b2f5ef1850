"""Benchmark generative models: location finding, CES preference elicitation and
cost-aware active learning on synthetic test functions.

All simulators are reparameterized: ``simulate(theta, x, noise)`` is a deterministic
function of its arguments and the outcome noise is drawn separately with
``sample_noise``.  Arrays broadcast over leading batch dimensions; designs and
parameters carry their feature axis last, outcomes are scalars.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, log_ndtr, logit

from .constraints import FeasibleBox
from .errors import InvalidInputError

LOG_2PI = math.log(2 * math.pi)


class Task:
    """Common probabilistic-task surface used by the posterior network and planner."""

    name = "task"
    design_dim: int
    param_dim: int
    design_box: FeasibleBox
    likelihood_kind = "gaussian"
    target_kind = "parameter"
    default_horizon = 30

    # unconstrained parameterisation seen by the posterior network
    @property
    def latent_dim(self) -> int:
        return self.param_dim

    def to_latent(self, theta):
        return np.asarray(theta, dtype=float)

    def from_latent(self, z):
        return np.asarray(z, dtype=float)

    def sample_noise(self, rng: np.random.Generator, shape=()):
        return rng.standard_normal(shape)

    def validate_observation(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("observation must be finite")
        return y

    def outcome_features(self, y):
        return np.asarray(y, dtype=float)

    def design_features(self, x):
        box = self.design_box
        return 2.0 * (np.asarray(x, dtype=float) - box.lower) / (box.upper - box.lower) - 1.0

    def describe(self) -> dict:
        return {"name": self.name}


def _gauss_logpdf(v, mean, std):
    z = (v - mean) / std
    return -0.5 * z * z - np.log(std) - 0.5 * LOG_2PI


# --------------------------------------------------------------------------- location finding


class LocationFinding(Task):
    """Signal-source localisation with an inverse-square intensity law.

    Observations are log-intensities, so the likelihood is Gaussian in the stored value.
    """

    name = "location_finding"
    likelihood_kind = "gaussian"
    default_horizon = 30

    def __init__(self, n_sources=1, dim=2, strength=1.0, background=0.1, max_signal=1e-4, noise_std=0.5):
        self.n_sources = int(n_sources)
        self.dim = int(dim)
        self.strength = float(strength)
        self.background = float(background)
        self.max_signal = float(max_signal)
        self.noise_std = float(noise_std)
        self.design_dim = self.dim
        self.param_dim = self.n_sources * self.dim
        self.design_box = FeasibleBox(np.zeros(self.dim), np.ones(self.dim))

    def describe(self):
        return {
            "name": self.name,
            "n_sources": self.n_sources,
            "dim": self.dim,
            "strength": self.strength,
            "background": self.background,
            "max_signal": self.max_signal,
            "noise_std": self.noise_std,
        }

    def prior_sample(self, rng, n=None):
        shape = (self.param_dim,) if n is None else (n, self.param_dim)
        return rng.random(shape)

    def prior_logpdf(self, theta):
        theta = np.asarray(theta)
        inside = np.all((theta >= 0) & (theta <= 1), axis=-1)
        return np.where(inside, 0.0, -np.inf)

    def intensity(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        src = theta.reshape(theta.shape[:-1] + (self.n_sources, self.dim))
        d2 = np.sum((src - x[..., None, :]) ** 2, axis=-1)
        return self.background + np.sum(self.strength / (self.max_signal + d2), axis=-1)

    def simulate(self, theta, x, noise):
        return np.log(self.intensity(theta, x)) + self.noise_std * np.asarray(noise)

    def loglik(self, y, x, theta):
        return _gauss_logpdf(np.asarray(y), np.log(self.intensity(theta, x)), self.noise_std)

    def to_latent(self, theta):
        return logit(np.clip(np.asarray(theta, dtype=float), 1e-12, 1 - 1e-12))

    def from_latent(self, z):
        return expit(np.asarray(z, dtype=float))

    def outcome_features(self, y):
        return (np.asarray(y, dtype=float) - 2.0) / 3.0


def locfind_intensity(theta, x, **kw):
    return LocationFinding(**kw).intensity(theta, x)


# --------------------------------------------------------------------------- CES


def ces_utility(z, rho, alpha):
    """CES utility ``(sum_i alpha_i z_i^rho)^(1/rho)``, evaluated in log space."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0) or np.any(rho > 1):
        raise InvalidInputError("rho must lie in (0, 1]")
    z = np.asarray(z, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore"):
        logz = np.log(z)
        loga = np.log(alpha)
    terms = loga + rho[..., None] * logz
    m = np.max(terms, axis=-1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(terms - m_safe), axis=-1)) + m_safe[..., 0]
    return np.exp(lse / rho)


class CES(Task):
    """Constant-elasticity-of-substitution preference elicitation between two baskets."""

    name = "ces"
    likelihood_kind = "censored_logit_normal"
    default_horizon = 10

    def __init__(self, n_goods=3, tau=0.005, eps=2.0**-22, max_quantity=100.0):
        self.n_goods = int(n_goods)
        self.tau = float(tau)
        self.eps = float(eps)
        self.max_quantity = float(max_quantity)
        self.design_dim = 2 * self.n_goods
        self.param_dim = 2 + self.n_goods  # rho, alpha (simplex), log u
        self.design_box = FeasibleBox(np.zeros(self.design_dim), np.full(self.design_dim, self.max_quantity))
        self._logit_hi = float(logit(1 - self.eps))

    def describe(self):
        return {"name": self.name, "n_goods": self.n_goods, "tau": self.tau, "eps": self.eps,
                "max_quantity": self.max_quantity}

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        k = self.n_goods
        return theta[..., 0], theta[..., 1:1 + k], theta[..., 1 + k]

    def prior_sample(self, rng, n=None):
        size = 1 if n is None else n
        rho = rng.beta(1.0, 1.0, size)
        alpha = rng.dirichlet(np.ones(self.n_goods), size)
        logu = rng.normal(1.0, 3.0, size)
        theta = np.column_stack([rho, alpha, logu])
        return theta[0] if n is None else theta

    def _moments(self, theta, x):
        rho, alpha, logu = self.split(theta)
        x = np.asarray(x, dtype=float)
        z, zp = x[..., : self.n_goods], x[..., self.n_goods:]
        u = np.exp(logu)
        mean = u * (ces_utility(z, rho, alpha) - ces_utility(zp, rho, alpha))
        std = u * self.tau * (1.0 + np.sqrt(np.sum((z - zp) ** 2, axis=-1)))
        return mean, std

    def simulate(self, theta, x, noise):
        mean, std = self._moments(theta, x)
        return np.clip(expit(mean + std * np.asarray(noise)), self.eps, 1 - self.eps)

    def validate_observation(self, y):
        y = super().validate_observation(y)
        if np.any(y < self.eps) or np.any(y > 1 - self.eps):
            raise InvalidInputError(f"CES observations must lie in [{self.eps}, {1 - self.eps}]")
        return y

    def loglik(self, y, x, theta):
        y = self.validate_observation(y)
        mean, std = self._moments(theta, x)
        lo = y <= self.eps
        hi = y >= 1 - self.eps
        yi = np.where(lo | hi, 0.5, y)
        eta = logit(yi)
        interior = _gauss_logpdf(eta, mean, std) - np.log(yi * (1 - yi))
        lower_tail = log_ndtr((-self._logit_hi - mean) / std)
        upper_tail = log_ndtr((mean - self._logit_hi) / std)
        return np.where(lo, lower_tail, np.where(hi, upper_tail, interior))

    @property
    def latent_dim(self):
        return 1 + (self.n_goods - 1) + 1

    def to_latent(self, theta):
        rho, alpha, logu = self.split(theta)
        rho = np.clip(rho, 1e-12, 1 - 1e-12)
        alpha = np.clip(alpha, 1e-300, None)
        alr = np.log(alpha[..., :-1]) - np.log(alpha[..., -1:])
        return np.concatenate([logit(rho)[..., None], alr, ((logu - 1.0) / 3.0)[..., None]], axis=-1)

    def from_latent(self, z):
        z = np.asarray(z, dtype=float)
        rho = expit(z[..., 0])
        alr = np.concatenate([z[..., 1:self.n_goods], np.zeros(z.shape[:-1] + (1,))], axis=-1)
        alr = alr - np.max(alr, axis=-1, keepdims=True)
        alpha = np.exp(alr)
        alpha /= np.sum(alpha, axis=-1, keepdims=True)
        logu = 1.0 + 3.0 * z[..., -1]
        # expit saturates to exactly 1.0 for large logits; keep rho inside (0, 1]
        rho = np.clip(rho, 1e-12, 1.0)
        return np.concatenate([rho[..., None], alpha, logu[..., None]], axis=-1)

    def outcome_features(self, y):
        y = np.clip(np.asarray(y, dtype=float), self.eps, 1 - self.eps)
        return logit(y) / self._logit_hi


# --------------------------------------------------------------------------- conjugate toy


class ConjugateGaussian(Task):
    """Known-variance Gaussian mean inference with a design-dependent gain, y ~ N(x*theta, s^2)."""

    name = "conjugate_gaussian"
    default_horizon = 10

    def __init__(self, prior_mean=0.0, prior_std=1.0, noise_std=0.5, design_range=1.0):
        self.prior_mean = float(prior_mean)
        self.prior_std = float(prior_std)
        self.noise_std = float(noise_std)
        self.design_dim = 1
        self.param_dim = 1
        self.design_box = FeasibleBox(np.array([-design_range]), np.array([design_range]))

    def describe(self):
        return {"name": self.name, "prior_mean": self.prior_mean, "prior_std": self.prior_std,
                "noise_std": self.noise_std}

    def prior_sample(self, rng, n=None):
        shape = (1,) if n is None else (n, 1)
        return self.prior_mean + self.prior_std * rng.standard_normal(shape)

    def simulate(self, theta, x, noise):
        return np.asarray(x)[..., 0] * np.asarray(theta)[..., 0] + self.noise_std * np.asarray(noise)

    def loglik(self, y, x, theta):
        return _gauss_logpdf(np.asarray(y), np.asarray(x)[..., 0] * np.asarray(theta)[..., 0], self.noise_std)

    def analytic_posterior(self, xs, ys):
        """Mean and std of the exact Gaussian posterior."""
        xs = np.asarray(xs, dtype=float).reshape(-1)
        ys = np.asarray(ys, dtype=float).reshape(-1)
        prec = 1.0 / self.prior_std**2 + np.sum(xs * xs) / self.noise_std**2
        mean = (self.prior_mean / self.prior_std**2 + np.sum(xs * ys) / self.noise_std**2) / prec
        return mean, 1.0 / math.sqrt(prec)

    def outcome_features(self, y):
        return np.asarray(y, dtype=float) / 1.5


# --------------------------------------------------------------------------- benchmarks + costs


BENCHMARK_DOMAINS = {
    "ackley": (np.array([-32.768, -32.768]), np.array([32.768, 32.768])),
    "branin": (np.array([-5.0, 0.0]), np.array([10.0, 15.0])),
    "goldstein_price": (np.array([-2.0, -2.0]), np.array([2.0, 2.0])),
}
AL_DOMAIN = (np.array([-5.0, -5.0]), np.array([5.0, 5.0]))


def rescale(name, x):
    """Affine map from the experiment domain [-5, 5]^2 to the function's canonical domain."""
    lo, hi = BENCHMARK_DOMAINS[name]
    u = (np.asarray(x, dtype=float) - AL_DOMAIN[0]) / (AL_DOMAIN[1] - AL_DOMAIN[0])
    return lo + u * (hi - lo)


def unrescale(name, v):
    lo, hi = BENCHMARK_DOMAINS[name]
    u = (np.asarray(v, dtype=float) - lo) / (hi - lo)
    return AL_DOMAIN[0] + u * (AL_DOMAIN[1] - AL_DOMAIN[0])


def ackley(v, a=20.0, b=0.2, c=2 * math.pi):
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    return (-a * np.exp(-b * np.sqrt(np.sum(v * v, axis=-1) / d))
            - np.exp(np.sum(np.cos(c * v), axis=-1) / d) + a + math.e)


def branin(v, a=1.0, b=5.1 / (4 * math.pi**2), c=5 / math.pi, r=6.0, s=10.0, t=1 / (8 * math.pi)):
    v = np.asarray(v, dtype=float)
    x1, x2 = v[..., 0], v[..., 1]
    return a * (x2 - b * x1**2 + c * x1 - r) ** 2 + s * (1 - t) * np.cos(x1) + s


def goldstein_price(v):
    """Log-form Goldstein-Price, shifted and scaled to roughly unit variance."""
    v = np.asarray(v, dtype=float)
    x1, x2 = v[..., 0], v[..., 1]
    f1 = 1 + (x1 + x2 + 1) ** 2 * (19 - 14 * x1 + 3 * x1**2 - 14 * x2 + 6 * x1 * x2 + 3 * x2**2)
    f2 = 30 + (2 * x1 - 3 * x2) ** 2 * (18 - 32 * x1 + 12 * x1**2 + 48 * x2 - 36 * x1 * x2 + 27 * x2**2)
    return (np.log(f1 * f2) - 8.693) / 2.427


_BENCHMARKS = {"ackley": ackley, "branin": branin, "goldstein_price": goldstein_price}


def benchmark_eval(name: str, x):
    """Evaluate a benchmark at points of the experiment domain [-5, 5]^2."""
    if name not in _BENCHMARKS:
        raise InvalidInputError(f"unknown benchmark {name!r}")
    return _BENCHMARKS[name](rescale(name, x))


@dataclass(frozen=True)
class HazardCenter:
    c_min: float = 0.05
    amplitude: float = 1.0
    width: float = 1.5
    name: str = "hazard_center"

    @property
    def min_cost(self) -> float:
        return self.c_min

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.c_min + self.amplitude * np.exp(-np.sum(x * x, axis=-1) / (2 * self.width**2))


@dataclass(frozen=True)
class RoughTerrain:
    amplitudes: tuple = (1.0, 0.5, 0.25)
    frequencies: tuple = (1.0, 2.0, 4.0)
    phase_u: tuple = (0.3, 1.1, 2.2)
    phase_v: tuple = (1.5, 0.7, 2.8)
    floor: float = 1e-3
    name: str = "rough_terrain"

    @property
    def min_cost(self) -> float:
        return self.floor

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        s = 0.0
        for a, k, p, q in zip(self.amplitudes, self.frequencies, self.phase_u, self.phase_v):
            s = s + a * np.sin(k * x[..., 0] + p) * np.cos(k * x[..., 1] + q)
        return np.logaddexp(0.0, s) + self.floor


@dataclass(frozen=True)
class NoCost:
    name: str = "none"
    min_cost: float = 0.0

    def __call__(self, x):
        return np.zeros(np.asarray(x).shape[:-1])


def make_cost_field(name: str):
    fields = {"hazard_center": HazardCenter, "rough_terrain": RoughTerrain, "none": NoCost}
    if name not in fields:
        raise InvalidInputError(f"unknown cost field {name!r}")
    return fields[name]()


def cost_field_eval(cost_field, x):
    return cost_field(x)


# --------------------------------------------------------------------------- active learning


class ActiveLearning(Task):
    """Regression on a rescaled benchmark with a location-dependent query cost.

    Outcomes are the benchmark standardised by its mean/std over a dense grid of the
    domain.  ``prior_sample``/``simulate`` describe the random-function prior used to
    train the amortized predictive model (random-Fourier-feature GP draws).
    """

    target_kind = "predictive"
    likelihood_kind = "gaussian"
    default_horizon = 30

    def __init__(self, benchmark="branin", cost="hazard_center", n_features=64,
                 lengthscale_range=(1.0, 5.0), obs_noise=0.01, cost_weight=None):
        if benchmark not in _BENCHMARKS:
            raise InvalidInputError(f"unknown benchmark {benchmark!r}")
        self.benchmark = benchmark
        self.cost_name = cost
        self.cost_field = make_cost_field(cost)
        self.name = f"al:{benchmark}:{cost}"
        self.design_dim = 2
        self.design_box = FeasibleBox(*AL_DOMAIN)
        self.n_features = int(n_features)
        self.lengthscale_range = tuple(float(v) for v in lengthscale_range)
        self.obs_noise = float(obs_noise)
        self.param_dim = 4 * self.n_features + 1
        if cost_weight is None:
            cost_weight = {"hazard_center": 1.0, "rough_terrain": 3.0}.get(cost, 1.0)
        self.cost_weight = float(cost_weight)
        grid = self.design_box.grid(201)
        vals = benchmark_eval(benchmark, grid)
        self._mean = float(np.mean(vals))
        self._std = float(np.std(vals))

    def describe(self):
        return {"name": self.name, "n_features": self.n_features,
                "lengthscale_range": list(self.lengthscale_range), "obs_noise": self.obs_noise,
                "cost_weight": self.cost_weight}

    def true_function(self, x):
        return (benchmark_eval(self.benchmark, x) - self._mean) / self._std

    # random-function prior (training only)
    def prior_sample(self, rng, n=None):
        size = 1 if n is None else n
        j = self.n_features
        lo, hi = np.log(self.lengthscale_range)
        ls = np.exp(rng.uniform(lo, hi, (size, 1)))
        omega = rng.standard_normal((size, 2 * j)) / ls
        phase = rng.uniform(0, 2 * np.pi, (size, j))
        amp = rng.standard_normal((size, j))
        theta = np.concatenate([omega, phase, amp, ls], axis=1)
        return theta[0] if n is None else theta

    def random_function(self, theta, x):
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        j = self.n_features
        omega = theta[..., : 2 * j].reshape(theta.shape[:-1] + (j, 2))
        phase = theta[..., 2 * j: 3 * j]
        amp = theta[..., 3 * j: 4 * j]
        proj = np.sum(omega * x[..., None, :], axis=-1) + phase
        return math.sqrt(2.0 / j) * np.sum(amp * np.cos(proj), axis=-1)

    def simulate(self, theta, x, noise):
        return self.random_function(theta, x) + self.obs_noise * np.asarray(noise)

    def loglik(self, y, x, theta):
        return _gauss_logpdf(np.asarray(y), self.random_function(theta, x), self.obs_noise)

    def outcome_features(self, y):
        return np.asarray(y, dtype=float) / 2.0


# --------------------------------------------------------------------------- registry


def make_task(name: str, **overrides) -> Task:
    """Task by config name: ``location_finding``, ``ces``, ``al:<benchmark>:<cost_field>``,
    ``conjugate_gaussian``, ``toy_discrete`` or ``toy_grid``."""
    if name == "location_finding":
        return LocationFinding(**overrides)
    if name == "ces":
        return CES(**overrides)
    if name == "conjugate_gaussian":
        return ConjugateGaussian(**overrides)
    if name.startswith("al:"):
        parts = name.split(":")
        if len(parts) != 3:
            raise InvalidInputError("active-learning tasks are named 'al:<benchmark>:<cost_field>'")
        return ActiveLearning(parts[1], parts[2], **overrides)
    if name in ("toy_discrete", "toy_grid"):
        from . import toys

        return toys.DiscreteBernoulliToy(**overrides) if name == "toy_discrete" else toys.GridGaussianToy(**overrides)
    raise InvalidInputError(f"unknown task {name!r}")


def task_name(task: Optional[Task]) -> str:
    return getattr(task, "name", "unknown")
