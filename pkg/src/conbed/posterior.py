"""Amortized posterior: a permutation-invariant set encoder with a mixture-density head.

Training runs in torch (float32); serving uses a float64 numpy forward pass so that
planner objectives are cheap, deterministic and independent of torch threading.
Parameters are modelled in each task's unconstrained latent space.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError, InvalidInputError, TrainingError
from .mixture import Categorical, GaussianMixture
from .tasks import Task, make_task

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STD_FLOOR = 1e-4


@dataclass
class NetworkConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    n_components: int = 10


@dataclass
class TrainConfig:
    epochs: int = 20000
    batch_size: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-2
    max_len: Optional[int] = None  # defaults to the task horizon
    min_len: int = 0
    n_targets: int = 32  # predictive training only
    checkpoint_every: int = 1000
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)


# --------------------------------------------------------------------------- torch model


class SetPosteriorNet(nn.Module):
    """Pair embedder -> mean pooling (+ set size features) -> trunk -> K-component MDN."""

    def __init__(self, design_dim: int, out_dim: int, cfg: NetworkConfig, predictive: bool = False):
        super().__init__()
        h, e, k = cfg.hidden_dim, cfg.embed_dim, cfg.n_components
        self.out_dim = out_dim
        self.n_components = k
        self.predictive = predictive
        self.embed = nn.Sequential(nn.Linear(design_dim + 1, h), nn.SiLU(), nn.Linear(h, h), nn.SiLU(), nn.Linear(h, e))
        if predictive:
            self.query = nn.Sequential(nn.Linear(design_dim, h), nn.SiLU(), nn.Linear(h, e))
        self.trunk_in = nn.Linear(e + 2 + (e if predictive else 0), h)
        self.trunk = nn.Sequential(nn.SiLU(), nn.Linear(h, h), nn.SiLU())
        self.head = nn.Linear(h, k * (1 + 2 * out_dim))

    def forward(self, xf, yf, mask, qf=None):
        pairs = self.embed(torch.cat([xf, yf[..., None]], dim=-1)) * mask[..., None]
        n = mask.sum(-1, keepdim=True)
        pooled = pairs.sum(-2) / n.clamp(min=1.0)
        feats = torch.cat([pooled, torch.log1p(n), 1.0 / (1.0 + n)], dim=-1)
        if self.predictive:
            q = self.query(qf)
            feats = torch.cat([feats[:, None, :].expand(-1, q.shape[1], -1), q], dim=-1)
        out = self.head(self.trunk(self.trunk_in(feats)))
        out = out.reshape(out.shape[:-1] + (self.n_components, 1 + 2 * self.out_dim))
        logw = torch.log_softmax(out[..., 0], dim=-1)
        mu = out[..., 1 : 1 + self.out_dim]
        std = F.softplus(out[..., 1 + self.out_dim :]) + STD_FLOOR
        return logw, mu, std


def mixture_nll(logw, mu, std, target):
    z = (target[..., None, :] - mu) / std
    comp = -0.5 * (z * z).sum(-1) - torch.log(std).sum(-1) - 0.5 * mu.shape[-1] * math.log(2 * math.pi)
    return -torch.logsumexp(comp + logw, dim=-1)


def simulate_batch(task: Task, rng, batch_size: int, max_len: int, min_len: int = 0, n_targets: int = 0):
    """Fresh (theta, history) pairs with uniform designs and uniform history lengths."""
    theta = task.prior_sample(rng, batch_size)
    box = task.design_box
    xs = box.sample(rng, (batch_size, max_len))
    ys = task.simulate(theta[:, None, :], xs, task.sample_noise(rng, (batch_size, max_len)))
    lengths = rng.integers(min_len, max_len + 1, batch_size)
    mask = (np.arange(max_len)[None, :] < lengths[:, None]).astype(float)
    out = {
        "xf": task.design_features(xs),
        "yf": task.outcome_features(ys),
        "mask": mask,
    }
    if task.target_kind == "predictive":
        xq = box.sample(rng, (batch_size, n_targets))
        yq = task.simulate(theta[:, None, :], xq, task.sample_noise(rng, (batch_size, n_targets)))
        out["qf"] = task.design_features(xq)
        out["target"] = yq[..., None]
    else:
        out["target"] = task.to_latent(theta)
    return out


def batch_loss(model: SetPosteriorNet, batch, dtype=torch.float32):
    t = {k: torch.as_tensor(v, dtype=dtype) for k, v in batch.items()}
    logw, mu, std = model(t["xf"], t["yf"], t["mask"], t.get("qf"))
    return mixture_nll(logw, mu, std, t["target"]).mean()


def _out_dim(task: Task) -> int:
    return 1 if task.target_kind == "predictive" else task.latent_dim


def build_model(task: Task, cfg: NetworkConfig) -> SetPosteriorNet:
    return SetPosteriorNet(task.design_dim, _out_dim(task), cfg, predictive=task.target_kind == "predictive")


def train(task: Task, cfg: TrainConfig, progress=None) -> "PosteriorNetwork":
    """Minimise the mixture NLL over freshly simulated histories (one batch per epoch)."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    max_len = cfg.max_len if cfg.max_len is not None else task.default_horizon
    model = build_model(task, cfg.network)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    trace = []
    last_good = None
    for epoch in range(cfg.epochs):
        batch = simulate_batch(task, rng, cfg.batch_size, max_len, cfg.min_len, cfg.n_targets)
        loss = batch_loss(model, batch)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}", checkpoint=last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        trace.append(loss.item())
        if (epoch + 1) % cfg.checkpoint_every == 0:
            last_good = _checkpoint_dict(model, task, cfg, trace)
            if progress is not None:
                progress(epoch + 1, float(np.mean(trace[-cfg.checkpoint_every :])))
    return PosteriorNetwork.from_dict(_checkpoint_dict(model, task, cfg, trace), task=task)


# --------------------------------------------------------------------------- checkpoints


def _checkpoint_dict(model: SetPosteriorNet, task: Task, cfg: TrainConfig, trace) -> dict:
    weights = {
        name: {"shape": list(p.shape), "data": p.detach().double().reshape(-1).tolist()}
        for name, p in model.state_dict().items()
    }
    training = asdict(cfg)
    return {
        "schema_version": SCHEMA_VERSION,
        "task": task.describe(),
        "target_kind": task.target_kind,
        "architecture": {
            "design_dim": task.design_dim,
            "out_dim": _out_dim(task),
            "predictive": task.target_kind == "predictive",
            **asdict(cfg.network),
        },
        "weights": weights,
        "training": training,
        "seed": cfg.seed,
        "loss_trace": list(trace),
    }


def task_from_description(desc: dict) -> Task:
    desc = dict(desc)
    name = desc.pop("name")
    if name.startswith("al:"):
        desc["lengthscale_range"] = tuple(desc["lengthscale_range"])
    return make_task(name, **desc)


def save_checkpoint(net: "PosteriorNetwork", path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(net.to_dict(), fh)
    os.replace(tmp, path)


def load_checkpoint(path, task: Optional[Task] = None) -> "PosteriorNetwork":
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint file {path}: {exc}") from exc
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema version {data.get('schema_version') if isinstance(data, dict) else None!r} "
            f"is not supported (expected {SCHEMA_VERSION})"
        )
    return PosteriorNetwork.from_dict(data, task=task)


# --------------------------------------------------------------------------- numpy serving


def _silu(v):
    return v / (1.0 + np.exp(-v))


def _softplus(v):
    return np.logaddexp(0.0, v)


class PosteriorNetwork:
    """Immutable float64 copy of a trained network."""

    def __init__(self, weights: dict, arch: dict, task: Task, meta: dict):
        self.w = weights
        self.arch = arch
        self.task = task
        self.meta = meta
        self.target_kind = "predictive" if arch["predictive"] else "parameter"
        self.n_components = arch["n_components"]
        self.out_dim = arch["out_dim"]
        self.embed_dim = arch["embed_dim"]
        e = self.embed_dim
        w_in = self.w["trunk_in.weight"]
        self._w_pool = w_in[:, :e]
        self._w_count = w_in[:, e : e + 2]
        self._w_query = w_in[:, e + 2 :]

    @classmethod
    def from_dict(cls, data: dict, task: Optional[Task] = None) -> "PosteriorNetwork":
        try:
            arch = data["architecture"]
            weights = {}
            for name, rec in data["weights"].items():
                arr = np.asarray(rec["data"], dtype=float)
                weights[name] = arr.reshape(rec["shape"])
            if task is None:
                task = task_from_description(data["task"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc
        meta = {k: data.get(k) for k in ("schema_version", "task", "training", "seed", "loss_trace", "target_kind")}
        return cls(weights, arch, task, meta)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "task": self.meta["task"],
            "target_kind": self.target_kind,
            "architecture": self.arch,
            "weights": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in self.w.items()},
            "training": self.meta["training"],
            "seed": self.meta["seed"],
            "loss_trace": self.meta["loss_trace"],
        }

    def _lin(self, name, v):
        return v @ self.w[f"{name}.weight"].T + self.w[f"{name}.bias"]

    def embed_pairs(self, x, y):
        """Per-pair embedding, broadcasting x (..., d) against y (...)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape[-1] != self.task.design_dim:
            raise InvalidInputError(f"design has dimension {x.shape[-1]}, expected {self.task.design_dim}")
        xf = self.task.design_features(x)
        yf = self.task.outcome_features(y)
        shape = np.broadcast_shapes(xf.shape[:-1], yf.shape)
        v = np.concatenate([np.broadcast_to(xf, shape + xf.shape[-1:]), np.broadcast_to(yf, shape)[..., None]], axis=-1)
        v = _silu(self._lin("embed.0", v))
        v = _silu(self._lin("embed.2", v))
        return self._lin("embed.4", v)

    def _trunk_pre(self, total, count):
        count = np.asarray(count, dtype=float)
        pooled = total / np.maximum(count, 1.0)[..., None]
        cf = np.stack([np.log1p(count), 1.0 / (1.0 + count)], axis=-1)
        return pooled @ self._w_pool.T + cf @ self._w_count.T + self.w["trunk_in.bias"]

    def query_features(self, xq):
        xf = self.task.design_features(np.asarray(xq, dtype=float))
        q = _silu(self._lin("query.0", xf))
        return self._lin("query.2", q) @ self._w_query.T

    def _head(self, pre):
        v = _silu(pre)
        v = _silu(self._lin("trunk.1", v))
        out = self._lin("head", v)
        out = out.reshape(out.shape[:-1] + (self.n_components, 1 + 2 * self.out_dim))
        d = self.out_dim
        return GaussianMixture(out[..., 0], out[..., 1 : 1 + d], _softplus(out[..., 1 + d :]) + STD_FLOOR)

    def mixture(self, total, count):
        if self.target_kind != "parameter":
            raise InvalidInputError("network was trained for predictive targets")
        return self._head(self._trunk_pre(total, count))

    def predictive_mixture(self, total, count, xq=None, query_pre=None):
        """Outcome mixture at query designs; ``query_pre`` caches ``query_features(xq)``."""
        if self.target_kind != "predictive":
            raise InvalidInputError("network was trained for parameter targets")
        q = self.query_features(xq) if query_pre is None else query_pre
        return self._head(self._trunk_pre(total, count) + q)


# --------------------------------------------------------------------------- beliefs


class Belief:
    """Sequentially updatable belief over parameters with a compact history summary.

    Summaries are tuples of arrays sharing leading batch dimensions; ``extend``
    broadcasts summary, design and outcome batches.
    """

    task: Task
    n_components: int
    latent_dim: int
    target_kind = "parameter"

    def empty(self):
        raise NotImplementedError

    def extend(self, summary, x, y):
        raise NotImplementedError

    def posterior(self, summary):
        raise NotImplementedError

    def to_param(self, z):
        return self.task.from_latent(z)

    def summarize(self, xs, ys):
        s = self.empty()
        for x, y in zip(xs, ys):
            s = self.extend(s, np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return s

    @staticmethod
    def expand(summary, n: int = 1):
        """Append ``n`` singleton batch axes to every summary array."""
        return Summary(tuple(_expand_arr(a, n, t) for a, t in zip(summary, summary.tails)), summary.tails)

    @staticmethod
    def index(summary, idx):
        return Summary(tuple(np.asarray(a)[idx] for a in summary), summary.tails)


def _expand_arr(a, n, tail):
    a = np.asarray(a)
    lead = a.ndim - tail
    return a.reshape(a.shape[:lead] + (1,) * n + a.shape[lead:])


class Summary(tuple):
    """Tuple of summary arrays plus the number of trailing (non-batch) axes per array."""

    def __new__(cls, arrays, tails):
        obj = super().__new__(cls, arrays)
        obj.tails = list(tails)
        return obj

    @property
    def batch_shape(self):
        a, t = self[0], self.tails[0]
        return np.shape(a)[: np.ndim(a) - t]


class NetworkBelief(Belief):
    """Belief served by a trained ``PosteriorNetwork``; summary = (embedding sum, count)."""

    def __init__(self, net: PosteriorNetwork):
        self.net = net
        self.task = net.task
        self.n_components = net.n_components
        self.latent_dim = net.out_dim
        self.target_kind = net.target_kind

    def empty(self):
        return Summary((np.zeros(self.net.embed_dim), np.zeros(())), (1, 0))

    def extend(self, summary, x, y):
        emb = self.net.embed_pairs(x, y)
        total, count = summary
        total = total + emb
        count = np.broadcast_to(count + 1.0, total.shape[:-1])
        return Summary((total, count), (1, 0))

    def posterior(self, summary):
        return self.net.mixture(*summary)

    def predictive(self, summary, xq=None, query_pre=None):
        return self.net.predictive_mixture(summary[0], summary[1], xq, query_pre)


class ExactBelief(Belief):
    """Exact posterior for tasks with a finite parameter support; summary = log weights."""

    def __init__(self, task):
        self.task = task
        self.n_components = len(task.support)
        self.latent_dim = task.param_dim

    def empty(self):
        return Summary((np.array(self.task.prior_logweights, dtype=float),), (1,))

    def extend(self, summary, x, y):
        (logw,) = summary
        logw = logw + self.task.support_loglik(y, x)
        return Summary((logw - np.max(logw, axis=-1, keepdims=True),), (1,))

    def posterior(self, summary):
        return Categorical(self.task.support, summary[0])

    def to_param(self, z):
        return np.asarray(z, dtype=float)


class ConjugateBelief(Belief):
    """Exact Gaussian posterior for ``ConjugateGaussian``; summary = (precision, shift)."""

    def __init__(self, task):
        self.task = task
        self.n_components = 1
        self.latent_dim = 1

    def empty(self):
        t = self.task
        return Summary((np.array(1.0 / t.prior_std**2), np.array(t.prior_mean / t.prior_std**2)), (0, 0))

    def extend(self, summary, x, y):
        prec, shift = summary
        x = np.asarray(x, dtype=float)[..., 0]
        s2 = self.task.noise_std**2
        prec, shift = np.broadcast_arrays(prec + x * x / s2, shift + x * np.asarray(y, dtype=float) / s2)
        return Summary((prec, shift), (0, 0))

    def posterior(self, summary):
        prec, shift = np.broadcast_arrays(*summary)
        mean = shift / prec
        std = 1.0 / np.sqrt(prec)
        return GaussianMixture(np.zeros(prec.shape + (1,)), mean[..., None, None], std[..., None, None])

    def to_param(self, z):
        return np.asarray(z, dtype=float)
