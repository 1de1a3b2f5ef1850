"""Scenario-tree lookahead planning and the receding-horizon campaign loop.

A tree of depth ``H`` holds one design per node.  Children are fantasised from their
parent with base noise that is drawn once per plan step, so the tree value is a
deterministic function of the stacked node designs and can be maximised with the
constrained SQP solver.  Node noise streams are keyed by (seed, step, depth, index),
which makes the root utility independent of the horizon.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import qmc

from . import constraints as cons
from .errors import FeasibilityError, InvalidInputError
from .optim import SolverConfig, solve
from .posterior import Summary

log = logging.getLogger(__name__)

UTILITY_NOISE, FANTASY_NOISE, INIT_NOISE = 0, 1, 2


def node_rng(seed: int, step: int, depth: int, index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), int(depth), int(index), int(purpose)]))


def _stack_noise(dicts):
    if not dicts or not dicts[0]:
        return {}
    return {k: np.stack([d[k] for d in dicts]) for k in dicts[0]}


def _reshape_summary(summary, batch_shape):
    arrays = []
    full = None
    for a, t in zip(summary, summary.tails):
        a = np.asarray(a)
        lead = a.shape[: a.ndim - t]
        full = lead if full is None else np.broadcast_shapes(full, lead)
    for a, t in zip(summary, summary.tails):
        a = np.asarray(a)
        tail = a.shape[a.ndim - t :]
        a = np.broadcast_to(a, full + tail)
        arrays.append(a.reshape(tuple(batch_shape) + tail))
    return Summary(tuple(arrays), summary.tails)


@dataclass
class PlannerConfig:
    horizon: int = 0
    branching: Union[int, List[int]] = 2
    gamma: float = 0.8
    n_random_starts: int = 0
    proposal: str = "greedy_grid"  # random_feasible | greedy_grid | external_table
    grid_points: int = 7
    max_grid: int = 256
    table_path: Optional[str] = None
    temperature: float = 0.5
    cost_weight: float = 0.0
    smooth_eps: float = 1e-3
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.horizon < 0:
            raise InvalidInputError("horizon must be nonnegative")
        if self.proposal not in ("random_feasible", "greedy_grid", "external_table"):
            raise InvalidInputError(f"unknown proposal policy {self.proposal!r}")
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)

    def branching_factors(self) -> List[int]:
        if isinstance(self.branching, int):
            return [self.branching] * self.horizon
        if len(self.branching) != self.horizon:
            raise InvalidInputError("branching list must have one entry per lookahead depth")
        return [int(b) for b in self.branching]


@dataclass
class PlannerDiagnostics:
    initial_objective: float
    final_objective: float
    status: str
    depth_utilities: List[float]
    n_iter: int
    n_fev: int
    start_index: int
    runtime: float = 0.0

    def to_dict(self) -> dict:
        return {
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "status": self.status,
            "depth_utilities": self.depth_utilities,
            "n_iter": self.n_iter,
            "n_fev": self.n_fev,
            "start_index": self.start_index,
        }


class ScenarioTree:
    """Fixed-noise scenario tree rooted at the current belief and constraint state."""

    def __init__(self, belief, utility, summary, state: cons.ConstraintState, horizon: int,
                 branching: Sequence[int], gamma: float = 0.8, seed: int = 0, step: int = 0,
                 temperature: float = 0.5, cost_weight: float = 0.0, cost_fn: Optional[Callable] = None,
                 smooth_eps: float = 1e-3):
        self.belief = belief
        self.task = belief.task
        self.utility = utility
        self.root_summary = summary
        self.state = state
        self.H = int(horizon)
        self.m = list(branching)
        if len(self.m) != self.H:
            raise InvalidInputError("need one branching factor per lookahead depth")
        self.gamma = float(gamma)
        self.temperature = temperature
        self.cost_weight = float(cost_weight)
        self.cost_fn = cost_fn
        self.smooth_eps = smooth_eps
        self.dx = self.task.design_dim
        self.counts = [1]
        for b in self.m:
            self.counts.append(self.counts[-1] * b)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)]) * self.dx
        self.n_nodes = int(sum(self.counts))
        self.n_vars = self.n_nodes * self.dx
        self.seed, self.step = seed, step

        self.util_noise = [
            _stack_noise([utility.draw_noise(node_rng(seed, step, d, j, UTILITY_NOISE)) for j in range(n)])
            for d, n in enumerate(self.counts)
        ]
        self.fantasy_noise = [
            _stack_noise([self._draw_fantasy(node_rng(seed, step, d, j, FANTASY_NOISE), self.m[d]) for j in range(n)])
            for d, n in enumerate(self.counts[:-1])
        ]
        self.alive = self._alive_depths()

    # ------------------------------------------------------------------ structure
    def _draw_fantasy(self, rng, m):
        k = self.belief.n_components
        if self.belief.target_kind == "predictive":
            return {"g": rng.gumbel(size=(m, k)), "e": rng.standard_normal((m, k, 1))}
        d = self.belief.latent_dim
        return {"g": rng.gumbel(size=(m, k)), "e": rng.standard_normal((m, k, d)), "ey": self.task.sample_noise(rng, (m,))}

    def _alive_depths(self):
        s = self.state
        if not s.has_budget:
            return [True] * (self.H + 1)
        floor = self.node_cost_floor()
        return [(d + 1) * floor <= s.remaining_budget + 1e-12 for d in range(self.H + 1)]

    def node_cost_floor(self) -> float:
        s = self.state
        if not s.has_budget:
            return 0.0
        if isinstance(s.cost_model, cons.SumAbsDiffCost):
            return float(s.cost_model.smooth(s.anchor, s.anchor, self.smooth_eps))
        return float(s.cost_model.min_cost)

    def parent_index(self, depth: int) -> np.ndarray:
        """Index (within depth-1) of each node's parent."""
        return np.arange(self.counts[depth]) // self.m[depth - 1]

    def split(self, Xb):
        Xb = np.atleast_2d(np.asarray(Xb, dtype=float))
        P = Xb.shape[0]
        return [Xb[:, self.offsets[d] : self.offsets[d + 1]].reshape(P, self.counts[d], self.dx) for d in range(self.H + 1)]

    def join(self, per_depth) -> np.ndarray:
        return np.concatenate([np.asarray(a).reshape(-1) for a in per_depth])

    # ------------------------------------------------------------------ evaluation
    def _fantasize(self, summary, x, noise):
        b = self.belief
        if b.target_kind == "predictive":
            q = b.predictive(summary, x)
            return q.unsqueeze(1).sample_reparam(noise["g"], noise["e"], self.temperature)[..., 0]
        q = b.posterior(summary)
        th = q.unsqueeze(1).sample_reparam(noise["g"], noise["e"], self.temperature)
        return self.task.simulate(b.to_param(th), x[..., None, :], noise["ey"])

    def child_summary(self, summary, x, depth):
        """Summaries of all children at ``depth + 1`` (batch ``(P, n_depth * m)``)."""
        P, n = x.shape[0], x.shape[1]
        y = self._fantasize(summary, x, self.fantasy_noise[depth])
        s = self.belief.extend(self.belief.expand(summary, 1), x[:, :, None, :], y)
        return _reshape_summary(s, (P, n * self.m[depth]))

    def summaries(self, xs, upto: int):
        """Node summaries for depths ``0..upto`` given designs at depths ``< upto``."""
        out = [self.belief.expand(self.root_summary, 2)]
        for d in range(upto):
            out.append(self.child_summary(out[-1], xs[d], d))
        return out

    def depth_terms(self, Xb):
        """Per-depth node utilities and costs, each shaped ``(P, n_depth)``."""
        xs = self.split(Xb)
        s = self.belief.expand(self.root_summary, 2)
        utils, costs = [], []
        for d in range(self.H + 1):
            u = np.asarray(self.utility(xs[d], s, self.util_noise[d]), dtype=float)
            u = np.broadcast_to(u, xs[d].shape[:2])
            bad = ~np.isfinite(u)
            if bad.any():
                j = int(np.argwhere(bad)[0][1])
                raise FloatingPointError(f"non-finite utility at depth {d}, node {j}")
            utils.append(u)
            costs.append(self.cost_fn(xs[d]) if self.cost_fn is not None else np.zeros(xs[d].shape[:2]))
            if d < self.H:
                s = self.child_summary(s, xs[d], d)
        return utils, costs

    def combine(self, utils, costs):
        num = 0.0
        den = 1.0
        for d, (u, c) in enumerate(zip(utils, costs)):
            if not self.alive[d]:
                continue
            num = num + self.gamma**d * u.mean(axis=-1)
            if self.cost_weight:
                den = den + self.cost_weight * self.gamma**d * c.mean(axis=-1)
        return num / den

    def values(self, Xb):
        """Tree value for each row of ``Xb`` (depth-batched)."""
        utils, costs = self.depth_terms(Xb)
        return np.asarray(self.combine(utils, costs), dtype=float) * np.ones(np.atleast_2d(Xb).shape[0])

    def value(self, x) -> float:
        return float(self.values(np.asarray(x, dtype=float)[None, :])[0])

    def value_sequential(self, x) -> float:
        """Node-by-node reference evaluation of ``value`` (no batching across nodes)."""
        xs = [a[0] for a in self.split(x)]
        b = self.belief
        root = self.root_summary

        def node_summary(d, j):
            path = []
            idx = j
            for dd in range(d, 0, -1):
                path.append((dd - 1, idx // self.m[dd - 1], idx % self.m[dd - 1]))
                idx //= self.m[dd - 1]
            s = b.expand(root, 1)
            for dd, a, br in reversed(path):
                nz = {k: v[a : a + 1, br : br + 1] for k, v in self.fantasy_noise[dd].items()}
                xa = xs[dd][a][None, :]
                y = self._fantasize(s, xa, nz)[:, 0]
                s = b.extend(s, xa, y)
            return s

        utils, costs = [], []
        for d in range(self.H + 1):
            ud, cd = [], []
            for j in range(self.counts[d]):
                nz = {k: v[j : j + 1] for k, v in self.util_noise[d].items()}
                xj = xs[d][j][None, :]
                ud.append(float(np.asarray(self.utility(xj, node_summary(d, j), nz)).reshape(-1)[0]))
                cd.append(float(np.asarray(self.cost_fn(xj)).reshape(-1)[0]) if self.cost_fn is not None else 0.0)
            utils.append(np.array(ud)[None, :])
            costs.append(np.array(cd)[None, :])
        return float(np.asarray(self.combine(utils, costs)).reshape(-1)[0])

    # ------------------------------------------------------------------ constraints
    def bounds(self):
        dom = self.state.domain
        lo = np.tile(dom.lower, self.n_nodes)
        hi = np.tile(dom.upper, self.n_nodes)
        root_box = cons.feasible_box(self.state)
        lo[: self.dx], hi[: self.dx] = root_box.lower, root_box.upper
        return lo, hi

    @property
    def has_rows(self) -> bool:
        s = self.state
        return s.has_budget or (s.has_transition and (self.H > 0 or s.norm_kind != "inf"))

    def _step_cost(self, x, anchor):
        return self.state.cost_model.smooth(x, anchor, self.smooth_eps)

    def _smooth_norm(self, v):
        kind = self.state.norm_kind
        if kind == "inf":
            raise AssertionError("inf-norm transitions use linear rows")
        if kind == "l2":
            return np.sqrt(np.sum(v * v, axis=-1) + self.smooth_eps**2)
        return np.sum(np.sqrt(v * v + self.smooth_eps**2), axis=-1)

    def rows(self, x):
        """Inequality rows (>= 0) encoding every node's unrolled constraint state."""
        s = self.state
        xs = [a[0] for a in self.split(x)]
        out = []
        if s.has_transition:
            if s.norm_kind != "inf":
                out.append(np.atleast_1d(s.delta - self._smooth_norm(xs[0][0] - s.anchor)))
            for d in range(1, self.H + 1):
                if not self.alive[d]:
                    continue
                diff = xs[d] - xs[d - 1][self.parent_index(d)]
                if s.norm_kind == "inf":
                    out.append((s.delta - diff).ravel())
                    out.append((s.delta + diff).ravel())
                else:
                    out.append(s.delta - self._smooth_norm(diff))
        if s.has_budget:
            spent = np.atleast_1d(self._step_cost(xs[0][0], s.anchor))
            if self.alive[0]:
                out.append(s.remaining_budget - spent)
            for d in range(1, self.H + 1):
                par = self.parent_index(d)
                spent = spent[par] + self._step_cost(xs[d], xs[d - 1][par])
                if self.alive[d]:
                    out.append(s.remaining_budget - spent)
        return np.concatenate(out) if out else np.zeros(0)

    # ------------------------------------------------------------------ initialisation
    def _node_boxes(self, parents):
        s = self.state
        dom = s.domain
        if not s.has_transition:
            lo = np.broadcast_to(dom.lower, parents.shape)
            hi = np.broadcast_to(dom.upper, parents.shape)
        else:
            lo = np.maximum(parents - s.delta, dom.lower)
            hi = np.minimum(parents + s.delta, dom.upper)
        return lo, np.maximum(lo, hi)

    def _spent(self, xs, d):
        """Smoothed path cost up to (and excluding) depth ``d`` for each depth-``d`` node."""
        s = self.state
        if not s.has_budget or d == 0:
            return np.zeros(self.counts[d])
        spent = np.atleast_1d(self._step_cost(xs[0][0], s.anchor))
        for dd in range(1, d):
            par = self.parent_index(dd)
            spent = spent[par] + self._step_cost(xs[dd], xs[dd - 1][par])
        return spent[self.parent_index(d)]

    def _node_feasible(self, cand, parents, spent, d):
        """Mask over candidates ``(G, n, dx)`` satisfying each node's rows."""
        s = self.state
        ok = np.ones(cand.shape[:2], dtype=bool)
        if s.has_transition and s.norm_kind != "inf":
            ok &= self._smooth_norm(cand - parents) <= s.delta
        if s.has_budget:
            ok &= spent + self._step_cost(cand, parents) <= s.remaining_budget
        return ok

    def _unit_candidates(self, cfg: PlannerConfig):
        if cfg.grid_points ** self.dx <= cfg.max_grid:
            return cons.FeasibleBox(np.zeros(self.dx), np.ones(self.dx)).grid(cfg.grid_points)
        return qmc.Halton(self.dx, scramble=False).random(cfg.max_grid + 1)[1:]

    def initial_designs(self, cfg: PlannerConfig, kind: str, rng=None, table=None):
        """Depth-wise proposal for every node; always satisfies the node rows."""
        s = self.state
        xs = []
        summaries = [self.belief.expand(self.root_summary, 2)]
        for d in range(self.H + 1):
            n = self.counts[d]
            if d == 0:
                parents = s.anchor[None, :]
            else:
                parents = xs[d - 1][self.parent_index(d)]
            lo, hi = self._node_boxes(parents)
            if d == 0 and s.has_transition and s.norm_kind == "inf":
                box = cons.feasible_box(s)
                lo, hi = box.lower[None, :], box.upper[None, :]
            spent = self._spent(xs, d)
            if kind == "greedy_grid":
                u = self._unit_candidates(cfg)
                cand = lo[None] + u[:, None, :] * (hi - lo)[None]
                vals = np.asarray(self.utility(cand, summaries[d], self.util_noise[d]), dtype=float)
                vals = np.broadcast_to(vals, cand.shape[:2]).copy()
                feas = self._node_feasible(cand, parents[None], spent[None], d)
                vals[~feas] = -np.inf
                if self.cost_weight and self.cost_fn is not None:
                    vals = vals / (1.0 + self.cost_weight * self.cost_fn(cand))
                best = np.argmax(vals, axis=0)
                x_d = cand[best, np.arange(n)]
                none = ~np.any(feas, axis=0)
                x_d[none] = parents[none]
            elif kind == "random_feasible":
                x_d = parents.copy()
                todo = np.ones(n, dtype=bool)
                for _ in range(50):
                    draw = lo + rng.random(lo.shape) * (hi - lo)
                    ok = self._node_feasible(draw[None], parents[None], spent[None], d)[0] & todo
                    x_d[ok] = draw[ok]
                    todo &= ~ok
                    if not todo.any():
                        break
            elif kind == "external_table":
                if table is None or len(table) == 0:
                    raise InvalidInputError("external_table proposal needs a design table")
                row = np.asarray(table[min(self.step + d, len(table) - 1)], dtype=float)
                draw = np.clip(np.broadcast_to(row, lo.shape), lo, hi)
                ok = self._node_feasible(draw[None], parents[None], spent[None], d)[0]
                x_d = np.where(ok[:, None], draw, parents)
            else:
                raise InvalidInputError(f"unknown proposal policy {kind!r}")
            if d == 0 and s.has_budget and not self._node_feasible(x_d[None], parents[None], spent[None], 0)[0, 0]:
                x_d = parents.copy()
            xs.append(np.asarray(x_d, dtype=float))
            if d < self.H:
                summaries.append(self.child_summary(summaries[d], xs[d][None], d))
        return self.join(xs)


def load_design_table(path) -> list:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"design table not found: {path}") from exc
    if not isinstance(data, dict) or "designs" not in data:
        raise InvalidInputError("design table must be a JSON object with a 'designs' list")
    return data["designs"]


class Planner:
    """Builds, initialises and optimises scenario trees; one ``plan_step`` per real step."""

    def __init__(self, belief, utility, cfg: PlannerConfig, seed: int = 0, cost_fn: Optional[Callable] = None):
        self.belief = belief
        self.utility = utility
        self.cfg = cfg
        self.seed = int(seed)
        self.cost_fn = cost_fn
        self.table = load_design_table(cfg.table_path) if cfg.proposal == "external_table" else None

    def build_tree(self, summary, state, step: int) -> ScenarioTree:
        c = self.cfg
        return ScenarioTree(self.belief, self.utility, summary, state, c.horizon, c.branching_factors(), c.gamma,
                            self.seed, step, c.temperature, c.cost_weight, self.cost_fn, c.smooth_eps)

    def propose(self, summary, state, step: int, rng=None):
        """Root design of the proposal policy alone (no tree optimisation)."""
        tree = self.build_tree(summary, state, step)
        kind = self.cfg.proposal
        rng = rng or node_rng(self.seed, step, 0, 0, INIT_NOISE)
        return tree.initial_designs(self.cfg, kind, rng, self.table)[: tree.dx]

    def plan_step(self, summary, state, step: int):
        t0 = time.perf_counter()
        if cons.is_exhausted(state):
            raise FeasibilityError("budget", -1.0)
        cfg = self.cfg
        tree = self.build_tree(summary, state, step)
        lo, hi = tree.bounds()
        ineq = tree.rows if tree.has_rows else None
        inits = [tree.initial_designs(cfg, cfg.proposal, node_rng(self.seed, step, 0, 0, INIT_NOISE), self.table)]
        for k in range(cfg.n_random_starts):
            inits.append(tree.initial_designs(cfg, "random_feasible", node_rng(self.seed, step, 0, k + 1, INIT_NOISE)))
        best = None
        root_blocked = state.has_budget and not tree.alive[0]
        for k, x0 in enumerate(inits):
            f0 = tree.value(x0)
            if root_blocked:
                res_x, res_f, status, n_it, n_fev = x0, f0, "stalled", 0, 1
            else:
                try:
                    res = solve(tree.value, x0, lo, hi, ineq=ineq, cfg=cfg.solver, objective_batch=tree.values)
                    res_x, res_f, status, n_it, n_fev = res.x, res.f, res.status, res.n_iter, res.n_fev
                except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                    log.warning("plan step %d start %d failed (%s); keeping its initial proposal", step, k, exc)
                    res_x, res_f, status, n_it, n_fev = x0, f0, "stalled", 0, 1
            if best is None or res_f > best[1]:
                best = (res_x, res_f, status, n_it, n_fev, f0, k)
        x_best, f_best, status, n_it, n_fev, f0, k_best = best
        utils, _ = tree.depth_terms(x_best[None, :])
        root = cons.repair(state, x_best[: tree.dx])
        diag = PlannerDiagnostics(
            initial_objective=float(f0),
            final_objective=float(f_best),
            status=status,
            depth_utilities=[float(u.mean()) for u in utils],
            n_iter=int(n_it),
            n_fev=int(n_fev),
            start_index=int(k_best),
            runtime=time.perf_counter() - t0,
        )
        return root, diag


# ---------------------------------------------------------------------- campaign loop

THETA_STREAM, EXEC_STREAM, POLICY_STREAM = 10, 11, 20


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


class CopexPolicy:
    """Receding-horizon tree planner over a belief that is updated with real data."""

    def __init__(self, belief, utility, cfg: PlannerConfig, seed: int = 0, cost_fn: Optional[Callable] = None):
        self.belief = belief
        self.planner = Planner(belief, utility, cfg, seed, cost_fn)
        self.summary = belief.empty()

    def propose(self, t: int, state):
        x, diag = self.planner.plan_step(self.summary, state, t)
        return x, diag.to_dict()

    def observe(self, x, y):
        self.summary = self.belief.extend(self.summary, np.asarray(x, dtype=float), np.asarray(y, dtype=float))


@dataclass
class CampaignResult:
    seed: int
    records: List[dict]
    theta_true: Optional[list]
    status: str = "complete"  # complete | exhausted | failed
    error: Optional[str] = None

    @property
    def designs(self) -> np.ndarray:
        return np.array([r["design"] for r in self.records], dtype=float)

    @property
    def observations(self) -> np.ndarray:
        return np.array([r["observation"] for r in self.records], dtype=float)


def execute(task, theta_true, x, seed: int, t: int) -> float:
    """Real (simulated) outcome at step ``t``: true simulator for BED tasks, the
    standardised benchmark for active learning."""
    if hasattr(task, "true_function"):
        return float(task.true_function(np.asarray(x, dtype=float)))
    noise = task.sample_noise(stream(seed, EXEC_STREAM, t), ())
    return float(task.simulate(np.asarray(theta_true), np.asarray(x, dtype=float), noise))


def draw_theta_true(task, seed: int):
    if hasattr(task, "true_function"):
        return None
    return np.asarray(task.prior_sample(stream(seed, THETA_STREAM)), dtype=float)


def run_campaign(task, state, policy, T: int, seed: int, on_record: Optional[Callable] = None) -> CampaignResult:
    """Plan, execute, update and transition until ``T`` steps or the budget runs out.

    ``on_record`` is called after each step so callers can persist partial results.
    """
    theta = draw_theta_true(task, seed)
    result = CampaignResult(seed, [], None if theta is None else theta.tolist())
    cumulative = 0.0
    cost_field = getattr(task, "cost_field", None)
    for t in range(T):
        if cons.is_exhausted(state):
            result.status = "exhausted"
            break
        t0 = time.perf_counter()
        try:
            x, diag = policy.propose(t, state)
        except Exception as exc:  # persisted by the caller
            result.status, result.error = "failed", f"{type(exc).__name__}: {exc}"
            raise
        runtime = time.perf_counter() - t0
        x = np.asarray(x, dtype=float)
        if state.has_budget:
            cost = float(cons.step_cost(state, x))
        elif cost_field is not None:
            cost = float(cost_field(x))
        else:
            cost = 0.0
        y = execute(task, theta, x, seed, t)
        policy.observe(x, y)
        state = cons.transition(state, x)
        cumulative += cost
        rec = {"t": t, "design": x.tolist(), "observation": y, "step_cost": cost,
               "cumulative_cost": cumulative, "runtime": runtime, "diagnostics": diag}
        if state.has_budget:
            rec["remaining_budget"] = float(state.remaining_budget)
        result.records.append(rec)
        if on_record is not None:
            on_record(rec)
    else:
        result.status = "complete"
    if result.status != "exhausted" and cons.is_exhausted(state) and len(result.records) < T:
        result.status = "exhausted"
    return result
