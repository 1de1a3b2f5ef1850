"""Campaign orchestration: configs, per-seed result files, aggregation and plot data.

A campaign config is a JSON object validated against ``CONFIG_SCHEMA``.  Each seed
writes ``seed_XXXX.jsonl`` (a header line, one line per executed step, a closing
summary line) plus a ``seed_XXXX.timing.json`` sidecar holding wall-clock numbers,
which are kept out of the result file so reruns reproduce it byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import jsonschema
import numpy as np

from . import constraints as cons
from .baselines import GpPolicy, RandomDesignPolicy, rmse_curve
from .errors import ConfigError, InvalidInputError
from .optim import SolverConfig
from .planner import CopexPolicy, PlannerConfig, run_campaign, stream
from .posterior import ConjugateBelief, ExactBelief, NetworkBelief, load_checkpoint
from .tasks import make_task
from .utility import AceUtility, EpigUtility, ExactEigUtility, PredictiveStdUtility, UtilityConfig, mean_ci, spce

log = logging.getLogger(__name__)

RESULT_VERSION = 1
SPCE_STREAM, TEST_STREAM, TARGET_STREAM, ANCHOR_STREAM = 12, 40, 41, 30
GP_METHODS = {"gp_us": "us", "gp_vr": "vr", "gp_epig": "epig", "gp_rs": "rs"}
METHODS = ["copex", "random_design"] + list(GP_METHODS)
PLOT_COLUMNS = ["method", "x", "mean", "ci_low", "ci_high"]

_num = {"type": "number"}
_int = {"type": "integer"}
_str = {"type": "string"}


def _field_schema(f):
    return {"int": _int, "str": _str}.get(str(f.type), _num)


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "method", "T", "seeds"],
    "properties": {
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": _str, "options": {"type": "object"}},
        },
        "constraint": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["transition", "budget", "composite", "none"]},
                "delta": _num,
                "norm": {"enum": ["inf", "l1", "l2"]},
                "budget": _num,
                "cost": _str,
            },
        },
        "anchor": {"oneOf": [{"enum": ["center", "random"]}, {"type": "array", "items": _num}]},
        "posterior": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kind": {"enum": ["network", "exact", "conjugate"]}, "checkpoint": _str},
        },
        "method": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": METHODS},
                "label": _str,
                "horizon": {"type": "integer", "minimum": 0},
                "branching": {"oneOf": [{"type": "integer", "minimum": 1},
                                        {"type": "array", "items": {"type": "integer", "minimum": 1}}]},
                "gamma": {"type": "number", "minimum": 0, "maximum": 1},
                "n_random_starts": {"type": "integer", "minimum": 0},
                "proposal": {"enum": ["random_feasible", "greedy_grid", "external_table"]},
                "grid_points": {"type": "integer", "minimum": 2},
                "max_grid": {"type": "integer", "minimum": 1},
                "table_path": _str,
                "utility": {"enum": ["ace", "epig", "predictive_std", "exact"]},
                "cost_weight": {"type": "number", "minimum": 0},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "restarts": {"type": "integer", "minimum": 1},
                "maxiter": {"type": "integer", "minimum": 1},
                "solver": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {f.name: _field_schema(f) for f in fields(SolverConfig)},
                },
            },
        },
        "utility": {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _field_schema(f) for f in fields(UtilityConfig)},
        },
        "T": {"type": "integer", "minimum": 1},
        "seeds": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "array", "items": _int, "minItems": 1}]},
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spce_L": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 1},
                "n_targets": {"type": "integer", "minimum": 1},
                "eval_seed": _int,
                "cost_grid_points": {"type": "integer", "minimum": 2},
            },
        },
        "output_dir": _str,
    },
}

METRIC_DEFAULTS = {"spce_L": 100000, "n_test": 200, "n_targets": 50, "eval_seed": 12345, "cost_grid_points": 21}

_vec = {"type": "array", "items": _num}
RESULT_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "required": ["type", "version", "config_hash", "seed", "method", "x", "task", "anchor", "theta_true"],
            "properties": {"type": {"const": "header"}, "version": {"const": 1}, "config_hash": _str,
                           "seed": _int, "method": _str, "x": _num, "task": _str, "anchor": _vec,
                           "theta_true": {"oneOf": [_vec, {"type": "null"}]}},
        },
        {
            "type": "object",
            "required": ["type", "t", "design", "observation", "step_cost", "cumulative_cost", "diagnostics"],
            "properties": {"type": {"const": "step"}, "t": {"type": "integer", "minimum": 0}, "design": _vec,
                           "observation": _num, "step_cost": {"type": "number", "minimum": 0},
                           "cumulative_cost": {"type": "number", "minimum": 0}, "diagnostics": {"type": "object"},
                           "remaining_budget": {"type": "number", "minimum": 0}},
        },
        {
            "type": "object",
            "required": ["type", "status", "n_steps", "metrics"],
            "properties": {"type": {"const": "summary"}, "status": {"enum": ["complete", "exhausted", "failed"]},
                           "n_steps": {"type": "integer", "minimum": 0}, "metrics": {"type": "object"}},
        },
    ]
}


# ---------------------------------------------------------------------- config handling


def validate_config(cfg: dict) -> dict:
    """Schema validation plus cross-field checks; returns the config unchanged."""
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    try:
        task = make_task(cfg["task"]["name"], **cfg["task"].get("options", {}))
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"bad task spec: {exc}") from exc
    m = cfg["method"]
    predictive = task.target_kind == "predictive"
    if m["name"] in GP_METHODS and not predictive:
        raise ConfigError(f"method {m['name']} needs an active-learning task")
    if m["name"] == "copex":
        kind = cfg.get("posterior", {}).get("kind", "network")
        if kind == "network" and "checkpoint" not in cfg.get("posterior", {}):
            raise ConfigError("copex with a network posterior needs posterior.checkpoint")
        util = m.get("utility")
        if util in ("epig", "predictive_std") and not predictive:
            raise ConfigError(f"utility {util} needs a predictive task")
        if util in ("ace", "exact") and predictive:
            raise ConfigError(f"utility {util} needs a parameter-inference task")
        if m.get("proposal") == "external_table" and "table_path" not in m:
            raise ConfigError("external_table proposal needs method.table_path")
    con = cfg.get("constraint", {"kind": "none"})
    try:
        cons.state_from_config(con, task.design_box, task=task)
    except InvalidInputError as exc:
        raise ConfigError(f"bad constraint spec: {exc}") from exc
    if "utility" in cfg:
        try:
            UtilityConfig(**cfg["utility"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad utility spec: {exc}") from exc
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = validate_config(cfg)
    cfg.setdefault("_base_dir", str(Path(path).resolve().parent))
    return cfg


def _public(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def config_hash(cfg: dict) -> str:
    """Hash of everything that shapes a single seed's result."""
    core = {k: v for k, v in _public(cfg).items() if k not in ("output_dir", "seeds")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def seed_list(cfg: dict) -> List[int]:
    s = cfg["seeds"]
    return list(range(s)) if isinstance(s, int) else [int(v) for v in s]


def output_dir(cfg: dict) -> Path:
    root = Path(os.environ.get("CONBED_OUTPUT_ROOT", "."))
    out = Path(cfg.get("output_dir", "results"))
    return out if out.is_absolute() else root / out


def _resolve(cfg: dict, path: str) -> str:
    p = Path(path)
    if p.is_absolute() or p.exists():
        return str(p)
    base = cfg.get("_base_dir")
    if base and (Path(base) / p).exists():
        return str(Path(base) / p)
    return str(p)


def method_label(cfg: dict) -> str:
    m = cfg["method"]
    if "label" in m:
        return m["label"]
    if m["name"] == "copex":
        return f"copex_H{m.get('horizon', 0)}"
    return m["name"]


def x_value(cfg: dict) -> float:
    """Sweep coordinate used in plot data: delta, else budget, else horizon."""
    c = cfg.get("constraint", {})
    if c.get("delta") is not None and c.get("kind") in ("transition", "composite"):
        return float(c["delta"])
    if c.get("budget") is not None:
        return float(c["budget"])
    return float(cfg["method"].get("horizon", 0))


# ---------------------------------------------------------------------- building a campaign

_BELIEF_CACHE: Dict[str, object] = {}


def build_task(cfg):
    return make_task(cfg["task"]["name"], **cfg["task"].get("options", {}))


def build_belief(cfg, task):
    post = cfg.get("posterior", {})
    kind = post.get("kind", "network")
    if kind == "exact":
        return ExactBelief(task)
    if kind == "conjugate":
        return ConjugateBelief(task)
    path = _resolve(cfg, post["checkpoint"])
    if path not in _BELIEF_CACHE:
        _BELIEF_CACHE[path] = NetworkBelief(load_checkpoint(path, task))
    return _BELIEF_CACHE[path]


def metric_cfg(cfg):
    return {**METRIC_DEFAULTS, **cfg.get("metrics", {})}


def al_points(task, cfg):
    """Shared held-out test set and EPIG target set for active-learning runs."""
    mc = metric_cfg(cfg)
    box = task.design_box
    test_x = box.sample(stream(mc["eval_seed"], TEST_STREAM), (mc["n_test"],))
    targets = box.sample(stream(mc["eval_seed"], TARGET_STREAM), (mc["n_targets"],))
    return test_x, task.true_function(test_x), targets


def initial_state(cfg, task, seed):
    anchor = cfg.get("anchor")
    if anchor is None:
        anchor = "random" if task.target_kind == "predictive" else "center"
    if anchor == "center":
        a = task.design_box.center
    elif anchor == "random":
        a = task.design_box.sample(stream(seed, ANCHOR_STREAM))
    else:
        a = np.asarray(anchor, dtype=float)
    return cons.state_from_config(cfg.get("constraint", {"kind": "none"}), task.design_box, a, task)


def build_policy(cfg, task, seed, state):
    m = cfg["method"]
    name = m["name"]
    predictive = task.target_kind == "predictive"
    if name == "random_design":
        return RandomDesignPolicy(seed)
    if name in GP_METHODS:
        _, _, targets = al_points(task, cfg)
        return GpPolicy(GP_METHODS[name], getattr(task, "cost_field", None), targets, seed,
                        restarts=m.get("restarts", 5), maxiter=m.get("maxiter", 100))
    belief = build_belief(cfg, task)
    ucfg = UtilityConfig(**cfg.get("utility", {}))
    util_name = m.get("utility")
    if util_name is None:
        util_name = ("predictive_std" if state.has_budget else "epig") if predictive else "ace"
    if util_name == "ace":
        utility = AceUtility(belief, ucfg)
    elif util_name == "exact":
        utility = ExactEigUtility(belief)
    elif util_name == "epig":
        utility = EpigUtility(belief, al_points(task, cfg)[2], ucfg)
    else:
        utility = PredictiveStdUtility(belief)
    horizon = m.get("horizon", 0)
    pcfg = PlannerConfig(
        horizon=horizon,
        branching=m.get("branching", 1),
        gamma=m.get("gamma", ucfg.gamma),
        n_random_starts=m.get("n_random_starts", 4 if predictive else 0),
        proposal=m.get("proposal", "greedy_grid"),
        grid_points=m.get("grid_points", 7),
        max_grid=m.get("max_grid", 256),
        table_path=_resolve(cfg, m["table_path"]) if "table_path" in m else None,
        temperature=m.get("temperature", ucfg.temperature),
        cost_weight=m.get("cost_weight", getattr(task, "cost_weight", 0.0) if predictive else 0.0),
        solver=SolverConfig(**m.get("solver", {})),
    )
    cost_fn = getattr(task, "cost_field", None) if predictive else None
    return CopexPolicy(belief, utility, pcfg, seed, cost_fn)


# ---------------------------------------------------------------------- running


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def seed_path(out: Path, seed: int) -> Path:
    return out / f"seed_{seed:04d}.jsonl"


def read_result(path) -> Optional[dict]:
    """Parse a result file; ``None`` if missing, truncated or corrupt."""
    try:
        lines = Path(path).read_text().splitlines()
        recs = [json.loads(line) for line in lines]
    except (OSError, json.JSONDecodeError, UnicodeDecodeError):
        return None
    if len(recs) < 2 or recs[0].get("type") != "header" or recs[-1].get("type") != "summary":
        return None
    steps = [r for r in recs[1:-1] if r.get("type") == "step"]
    return {"header": recs[0], "steps": steps, "summary": recs[-1]}


def validate_result(path) -> None:
    """Check every line of a result file against ``RESULT_SCHEMA``."""
    for i, line in enumerate(Path(path).read_text().splitlines()):
        try:
            jsonschema.validate(json.loads(line), RESULT_SCHEMA)
        except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
            raise InvalidInputError(f"{path}: line {i + 1} is not a valid result record: {exc}") from exc


def is_complete(path, chash: str) -> bool:
    res = read_result(path)
    return res is not None and res["header"].get("config_hash") == chash


def final_metrics(cfg, task, result) -> dict:
    mc = metric_cfg(cfg)
    xs, ys = result.designs, result.observations
    if task.target_kind == "predictive":
        test_x, test_y, _ = al_points(task, cfg)
        curve = rmse_curve(xs, ys, test_x, test_y, seed=mc["eval_seed"])
        costs = [0.0] + [r["cumulative_cost"] for r in result.records]
        return {"rmse": curve, "cost": costs, "rmse_final": curve[-1], "total_cost": costs[-1]}
    val = spce(task, xs, ys, np.asarray(result.theta_true), mc["spce_L"], stream(result.seed, SPCE_STREAM))
    total = result.records[-1]["cumulative_cost"] if result.records else 0.0
    return {"spce": val, "total_cost": total}


def run_seed(cfg: dict, seed: int, out: Path) -> Path:
    """Run one seed and write its result file (steps streamed as they complete)."""
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    task = build_task(cfg)
    state = initial_state(cfg, task, seed)
    policy = build_policy(cfg, task, seed, state)
    path = seed_path(out, seed)
    tmp = path.with_suffix(".jsonl.partial")
    runtimes = []
    cpu0 = time.process_time()
    with open(tmp, "w") as fh:
        header = {"type": "header", "version": RESULT_VERSION, "config_hash": chash, "seed": seed,
                  "method": method_label(cfg), "x": x_value(cfg), "task": cfg["task"]["name"],
                  "anchor": state.anchor.tolist()}

        def on_record(rec):
            rec = dict(rec)
            runtimes.append(rec.pop("runtime"))
            fh.write(_dump({"type": "step", **rec}) + "\n")
            fh.flush()

        try:
            result = run_campaign(task, state, policy, cfg["T"], seed, on_record)
        except Exception:
            log.exception("seed %d failed; partial records kept in %s", seed, tmp)
            raise
        header["theta_true"] = result.theta_true
        steps = tmp.read_text()
    summary = {"type": "summary", "status": result.status, "n_steps": len(result.records),
               "metrics": final_metrics(cfg, task, result)}
    with open(tmp, "w") as fh:
        fh.write(_dump(header) + "\n" + steps + _dump(summary) + "\n")
    os.replace(tmp, path)
    with open(out / f"seed_{seed:04d}.timing.json", "w") as fh:
        json.dump({"seed": seed, "config_hash": chash, "horizon": cfg["method"].get("horizon", 0),
                   "plan_runtimes": runtimes, "cpu_seconds": time.process_time() - cpu0}, fh)
    return path


def _worker(args):
    cfg, seed, out = args
    return str(run_seed(cfg, seed, Path(out)))


def run(cfg: dict, jobs: int = 1, seeds: Optional[Iterable[int]] = None) -> dict:
    """Run every seed not already complete, then aggregate and write the summary."""
    if cfg["method"]["name"] == "copex":
        build_belief(cfg, build_task(cfg))  # fail on a bad checkpoint before touching the output dir
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    seeds = seed_list(cfg) if seeds is None else list(seeds)
    todo = [s for s in seeds if not is_complete(seed_path(out, s), chash)]
    skipped = len(seeds) - len(todo)
    if skipped:
        log.info("skipping %d completed seeds", skipped)
    with open(out / "config.json", "w") as fh:
        json.dump(_public(cfg), fh, indent=2, sort_keys=True)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_worker, [(cfg, s, str(out)) for s in todo]))
    else:
        for s in todo:
            run_seed(cfg, s, out)
    files = [seed_path(out, s) for s in seeds]
    summary = aggregate(files, cost_grid_points=metric_cfg(cfg)["cost_grid_points"])
    write_summary(summary, out)
    return summary


# ---------------------------------------------------------------------- aggregation


def _stats(values, level=0.95) -> dict:
    mean, half = mean_ci(values, level)
    if len(values) >= 2 and np.ptp(values) == 0:
        half = 0.0
    return {"mean": mean, "half_width": half, "ci_low": mean - half, "ci_high": mean + half, "n": len(values)}


def cost_grid(max_cost: float, n: int) -> np.ndarray:
    return np.linspace(0.0, max_cost, n)


def interp_curve(costs, values, grid):
    """Linear interpolation of a per-step curve onto a cumulative-cost grid."""
    return np.interp(grid, np.asarray(costs, dtype=float), np.asarray(values, dtype=float))


def aggregate(files: Iterable, cost_grid_points: int = 21, level: float = 0.95) -> dict:
    """Mean and t-interval per metric for each (method, sweep value) group."""
    results = []
    for f in sorted(str(p) for p in files):
        r = read_result(f)
        if r is None:
            raise InvalidInputError(f"incomplete or corrupt result file: {f}")
        results.append(r)
    if not results:
        raise InvalidInputError("no result files to aggregate")
    groups: Dict[tuple, list] = {}
    for r in results:
        h = r["header"]
        groups.setdefault((h["method"], h["x"]), []).append(r)
    curves = [r for r in results if "rmse" in r["summary"]["metrics"]]
    grid = None
    if curves:
        grid = cost_grid(min(r["summary"]["metrics"]["cost"][-1] for r in curves), cost_grid_points)
    out = {"groups": []}
    for (label, xv), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        hashes = {r["header"]["config_hash"] for r in rs}
        if len(hashes) > 1:
            raise InvalidInputError(f"mixed config hashes for method {label} at x={xv}: {sorted(hashes)}")
        rs = sorted(rs, key=lambda r: r["header"]["seed"])
        g = {"method": label, "x": xv, "config_hash": hashes.pop(), "n_runs": len(rs),
             "seeds": [r["header"]["seed"] for r in rs], "metrics": {}}
        keys = [k for k, v in rs[0]["summary"]["metrics"].items() if not isinstance(v, list)]
        for k in keys:
            g["metrics"][k] = _stats([r["summary"]["metrics"][k] for r in rs], level)
        g["metrics"]["n_steps"] = _stats([r["summary"]["n_steps"] for r in rs], level)
        if grid is not None and "rmse" in rs[0]["summary"]["metrics"]:
            mat = np.array([interp_curve(r["summary"]["metrics"]["cost"], r["summary"]["metrics"]["rmse"], grid)
                            for r in rs])
            cols = [_stats(mat[:, j], level) for j in range(len(grid))]
            g["curve"] = {"x": grid.tolist(), **{k: [c[k] for c in cols] for k in ("mean", "ci_low", "ci_high")}}
        out["groups"].append(g)
    return out


def write_summary(summary: dict, out: Path) -> None:
    out = Path(out)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "x", "metric", "mean", "ci_low", "ci_high", "n"])
        for g in summary["groups"]:
            for k, s in sorted(g["metrics"].items()):
                w.writerow([g["method"], repr(g["x"]), k, repr(s["mean"]), repr(s["ci_low"]), repr(s["ci_high"]), s["n"]])


def timing_summary(dirs: Iterable) -> dict:
    """Per-horizon plan-step runtimes from the timing sidecars."""
    by_h: Dict[int, list] = {}
    for d in dirs:
        for p in sorted(Path(d).glob("seed_*.timing.json")):
            t = json.loads(p.read_text())
            by_h.setdefault(int(t["horizon"]), []).extend(t["plan_runtimes"])
    return {h: _stats(v) for h, v in sorted(by_h.items()) if v}


def _primary_metric(g: dict) -> Optional[str]:
    for k in ("spce", "rmse_final"):
        if k in g["metrics"]:
            return k
    return None


def emit_plot_data(summary: dict, out, runtimes: Optional[dict] = None) -> List[Path]:
    """CSV files with columns ``method, x, mean, ci_low, ci_high``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def write(name, rows):
        p = out / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PLOT_COLUMNS)
            for r in rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        written.append(p)

    final_rows = []
    for g in summary["groups"]:
        k = _primary_metric(g)
        if k is not None:
            s = g["metrics"][k]
            final_rows.append((g["method"], g["x"], s["mean"], s["ci_low"], s["ci_high"]))
    if final_rows:
        write("final_metric.csv", final_rows)
    curve_rows = [(g["method"], x, m, lo, hi) for g in summary["groups"] if "curve" in g
                  for x, m, lo, hi in zip(g["curve"]["x"], g["curve"]["mean"], g["curve"]["ci_low"], g["curve"]["ci_high"])]
    if curve_rows:
        write("rmse_vs_cost.csv", curve_rows)
    if runtimes:
        write("runtime_vs_h.csv", [("copex", h, s["mean"], s["ci_low"], s["ci_high"]) for h, s in sorted(runtimes.items())])
    return written


def read_plot_data(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"method": r["method"], **{k: float(r[k]) for k in PLOT_COLUMNS[1:]}} for r in rows]


# ---------------------------------------------------------------------- interactive session


def belief_report(policy) -> Optional[dict]:
    if not isinstance(policy, CopexPolicy) or policy.belief.target_kind != "parameter":
        return None
    q = policy.belief.posterior(policy.summary)
    out = {"weights": np.exp(q.log_weights).tolist()}
    if hasattr(q, "means"):
        out["means"] = q.means.tolist()
        out["stds"] = q.stds.tolist()
    else:
        out["support"] = q.support.tolist()
    out["mean"] = np.asarray(policy.belief.to_param(q.mean())).tolist()
    return out


def session(cfg: dict, seed: int, fin, fout, session_path=None) -> List[dict]:
    """Propose/observe loop over text streams; one JSON object per printed line.

    Observations already stored in ``session_path`` are replayed first, and the file is
    rewritten after every accepted observation and on end of input.
    """
    task = build_task(cfg)
    state = initial_state(cfg, task, seed)
    policy = build_policy(cfg, task, seed, state)
    chash = config_hash(cfg)
    history: List[dict] = []
    if session_path and Path(session_path).exists():
        saved = json.loads(Path(session_path).read_text())
        if saved.get("config_hash") != chash or saved.get("seed") != seed:
            raise ConfigError("session file belongs to a different config or seed")
        for t, step in enumerate(saved["history"]):
            policy.propose(t, state)
            x = np.asarray(step["design"], dtype=float)
            policy.observe(x, step["observation"])
            state = cons.transition(state, x)
            history.append(step)

    def save():
        if session_path:
            Path(session_path).write_text(_dump({"config_hash": chash, "seed": seed, "history": history}))

    def emit(obj):
        fout.write(_dump(obj) + "\n")
        fout.flush()

    for t in range(len(history), cfg["T"]):
        if cons.is_exhausted(state):
            emit({"event": "exhausted", "t": t})
            save()
            return history
        x, _ = policy.propose(t, state)
        x = np.asarray(x, dtype=float)
        emit({"event": "propose", "t": t, "design": x.tolist(), "posterior": belief_report(policy),
              "remaining_budget": state.remaining_budget})
        while True:
            line = fin.readline()
            if not line:
                save()
                emit({"event": "eof", "t": t})
                return history
            try:
                y = float(task.validate_observation(float(line.strip())))
            except (ValueError, InvalidInputError) as exc:
                emit({"event": "error", "t": t, "message": str(exc)})
                continue
            break
        policy.observe(x, y)
        state = cons.transition(state, x)
        history.append({"design": x.tolist(), "observation": y})
        save()
    emit({"event": "done", "t": len(history)})
    return history
