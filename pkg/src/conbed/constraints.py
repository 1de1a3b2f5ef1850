"""Constraint states for time-varying design feasibility.

A :class:`ConstraintState` bundles the previous design (the anchor), an optional
per-step movement limit and an optional remaining budget.  States are immutable;
:func:`transition` returns the successor after executing a design.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import FeasibilityError, InvalidInputError

NORMS = ("inf", "l1", "l2")
_FLOAT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeasibleBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidInputError("box bounds must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise InvalidInputError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = _FLOAT_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else tuple(np.atleast_1d(size)) + (self.dim,)
        return self.lower + (self.upper - self.lower) * rng.random(shape)

    def grid(self, points_per_dim: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


class SumAbsDiffCost:
    """Cost equal to the total absolute change from the anchor."""

    name = "sum_abs_diff"
    min_cost = 0.0

    def __call__(self, x, anchor):
        return np.sum(np.abs(np.asarray(x) - anchor), axis=-1)

    def smooth(self, x, anchor, eps: float = 1e-3):
        # sqrt(d^2 + eps^2) >= |d|: a smoothed budget row that holds implies the exact one
        d = np.asarray(x) - anchor
        return np.sum(np.sqrt(d * d + eps * eps), axis=-1)

    def __repr__(self):
        return "SumAbsDiffCost()"


class FieldCost:
    """Location-dependent cost read from a cost field ``field(x)``."""

    def __init__(self, cost_field, name: Optional[str] = None):
        self.field = cost_field
        self.name = f"field:{name or getattr(cost_field, 'name', 'custom')}"
        self.min_cost = float(getattr(cost_field, "min_cost", 0.0))

    def __call__(self, x, anchor=None):
        return self.field(np.asarray(x, dtype=float))

    def smooth(self, x, anchor=None, eps: float = 0.0):
        return self(x)

    def __repr__(self):
        return f"FieldCost({self.name})"


@dataclass(frozen=True, eq=False)
class ConstraintState:
    anchor: np.ndarray
    domain: FeasibleBox
    delta: Optional[float] = None
    norm_kind: str = "inf"
    remaining_budget: Optional[float] = None
    cost_model: Optional[Callable] = None
    total_budget: Optional[float] = field(default=None)

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=float)
        object.__setattr__(self, "anchor", anchor)
        if anchor.shape != (self.domain.dim,):
            raise InvalidInputError("anchor dimension does not match the design domain")
        if not self.domain.contains(anchor, tol=1e-9):
            raise InvalidInputError("anchor lies outside the design domain")
        if self.norm_kind not in NORMS:
            raise InvalidInputError(f"unknown norm {self.norm_kind!r}")
        if self.delta is not None and self.delta < 0:
            raise InvalidInputError("delta must be nonnegative")
        if self.remaining_budget is not None:
            if self.remaining_budget < -_FLOAT_TOL:
                raise InvalidInputError("remaining budget must be nonnegative")
            if self.cost_model is None:
                raise InvalidInputError("budget constraints need a cost model")
            if self.total_budget is None:
                object.__setattr__(self, "total_budget", float(self.remaining_budget))

    @property
    def kind(self) -> str:
        has_t = self.delta is not None and np.isfinite(self.delta)
        has_b = self.remaining_budget is not None
        if has_t and has_b:
            return "composite"
        if has_b:
            return "budget"
        if has_t:
            return "transition"
        return "none"

    @property
    def has_transition(self) -> bool:
        return self.delta is not None and np.isfinite(self.delta)

    @property
    def has_budget(self) -> bool:
        return self.remaining_budget is not None

    @property
    def dim(self) -> int:
        return self.domain.dim


def norm(v, kind: str):
    v = np.asarray(v, dtype=float)
    if kind == "inf":
        return np.max(np.abs(v), axis=-1)
    if kind == "l1":
        return np.sum(np.abs(v), axis=-1)
    if kind == "l2":
        return np.sqrt(np.sum(v * v, axis=-1))
    raise InvalidInputError(f"unknown norm {kind!r}")


def _check_dim(state: ConstraintState, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (state.dim,):
        raise InvalidInputError(f"design has dimension {x.shape[-1:]} but the task expects {state.dim}")
    return x


def step_cost(state: ConstraintState, x) -> float:
    """Cost of executing ``x`` from ``state``; zero when no cost rule is attached."""
    x = _check_dim(state, x)
    if state.cost_model is None:
        return np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0
    c = state.cost_model(x, state.anchor)
    return c if np.ndim(c) else float(c)


def violations(state: ConstraintState, x) -> dict:
    """Signed margins of every rule (negative means violated)."""
    x = _check_dim(state, x)
    out = {
        "domain": float(min(np.min(x - state.domain.lower), np.min(state.domain.upper - x))),
    }
    if state.has_transition:
        out["transition"] = float(state.delta - norm(x - state.anchor, state.norm_kind))
    if state.has_budget:
        out["budget"] = float(state.remaining_budget - step_cost(state, x))
    return out


def contains(state: ConstraintState, x, slack: float = 0.0) -> bool:
    """True iff ``x`` is admissible from ``state`` (rules conjoined), up to ``slack``."""
    margins = violations(state, x)
    tol = slack + _FLOAT_TOL
    if margins["domain"] < -_FLOAT_TOL:
        return False
    return all(m >= -tol for k, m in margins.items() if k != "domain")


def transition(state: ConstraintState, x, slack: float = 0.0) -> ConstraintState:
    """Successor state after executing ``x``: anchor moves to ``x`` and the cost is spent."""
    x = _check_dim(state, x)
    margins = violations(state, x)
    tol = slack + _FLOAT_TOL
    for rule, margin in margins.items():
        limit = _FLOAT_TOL if rule == "domain" else tol
        if margin < -limit:
            raise FeasibilityError(rule, margin)
    budget = state.remaining_budget
    if budget is not None:
        budget = max(0.0, budget - step_cost(state, x))
    return replace(state, anchor=state.domain.clip(x.copy()), remaining_budget=budget)


def feasible_box(state: ConstraintState, domain: Optional[FeasibleBox] = None) -> FeasibleBox:
    """Box containing the feasible set; exact for the inf-norm transition rule."""
    domain = domain or state.domain
    if not state.has_transition or state.norm_kind != "inf":
        return domain
    lo = np.maximum(state.anchor - state.delta, domain.lower)
    hi = np.minimum(state.anchor + state.delta, domain.upper)
    return FeasibleBox(lo, np.maximum(lo, hi))


def cheapest_point(state: ConstraintState, grid_points: int = 41) -> np.ndarray:
    """Lowest-cost design inside the transition set (the anchor for anchor-relative costs)."""
    if not state.has_budget or isinstance(state.cost_model, SumAbsDiffCost):
        return state.anchor.copy()
    box = feasible_box(state)
    cand = box.grid(grid_points)
    if state.has_transition and state.norm_kind != "inf":
        cand = cand[norm(cand - state.anchor, state.norm_kind) <= state.delta]
        cand = np.vstack([cand, state.anchor[None]])
    costs = state.cost_model(cand, state.anchor)
    return cand[int(np.argmin(costs))]


def is_exhausted(state: ConstraintState) -> bool:
    """No admissible design remains (budget spent or nothing affordable)."""
    if not state.has_budget:
        return False
    if state.remaining_budget <= _FLOAT_TOL:
        return True
    cheapest = cheapest_point(state)
    return bool(step_cost(state, cheapest) > state.remaining_budget)


def repair(state: ConstraintState, x) -> np.ndarray:
    """Nearby exactly-feasible design (used on solver outputs within slack)."""
    x = state.domain.clip(_check_dim(state, x).copy())
    if state.has_transition:
        d = x - state.anchor
        if state.norm_kind == "inf":
            d = np.clip(d, -state.delta, state.delta)
        else:
            n = norm(d, state.norm_kind)
            if n > state.delta:
                d = d * (state.delta / n) * (1 - 1e-12)
        x = state.domain.clip(state.anchor + d)
    if state.has_budget and step_cost(state, x) > state.remaining_budget:
        base = cheapest_point(state)
        if step_cost(state, base) > state.remaining_budget:
            raise FeasibilityError("budget", state.remaining_budget - step_cost(state, base))
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if step_cost(state, base + mid * (x - base)) <= state.remaining_budget:
                lo = mid
            else:
                hi = mid
        x = base + lo * (x - base)
    return x


def sample_feasible(state: ConstraintState, rng: np.random.Generator, max_tries: int = 200) -> np.ndarray:
    """Uniform draw from the feasible set (rejection inside the bounding box)."""
    if is_exhausted(state):
        raise FeasibilityError("budget", -1.0)
    box = feasible_box(state)
    for _ in range(max_tries):
        x = box.sample(rng)
        if contains(state, x):
            return x
    # Tiny feasible sets: shrink a box draw toward the cheapest point.
    return repair(state, box.sample(rng))


def make_state(
    domain: FeasibleBox,
    anchor=None,
    delta: Optional[float] = None,
    norm_kind: str = "inf",
    budget: Optional[float] = None,
    cost_model=None,
) -> ConstraintState:
    anchor = domain.center if anchor is None else np.asarray(anchor, dtype=float)
    if delta is not None and not np.isfinite(delta):
        delta = None
    return ConstraintState(
        anchor=anchor,
        domain=domain,
        delta=delta,
        norm_kind=norm_kind,
        remaining_budget=None if budget is None else float(budget),
        cost_model=cost_model,
    )


def cost_model_from_name(name: Optional[str], task=None):
    if name in (None, "none"):
        return None
    if name == "sum_abs_diff":
        return SumAbsDiffCost()
    if name.startswith("field:"):
        from .tasks import make_cost_field

        field_name = name.split(":", 1)[1]
        return FieldCost(make_cost_field(field_name), field_name)
    raise InvalidInputError(f"unknown cost rule {name!r}")


def state_from_config(spec: dict, domain: FeasibleBox, anchor=None, task=None) -> ConstraintState:
    """Build the initial state from a campaign-config constraint block."""
    kind = spec.get("kind", "transition")
    if kind not in ("transition", "budget", "composite", "none"):
        raise InvalidInputError(f"unknown constraint kind {kind!r}")
    delta = spec.get("delta") if kind in ("transition", "composite") else None
    budget = spec.get("budget") if kind in ("budget", "composite") else None
    if kind in ("transition", "composite") and delta is None:
        raise InvalidInputError("transition constraints need 'delta'")
    if kind in ("budget", "composite") and budget is None:
        raise InvalidInputError("budget constraints need 'budget'")
    cost = cost_model_from_name(spec.get("cost"), task)
    if budget is not None and cost is None:
        raise InvalidInputError("budget constraints need a 'cost' rule")
    return make_state(domain, anchor, delta, spec.get("norm", "inf"), budget, cost)
