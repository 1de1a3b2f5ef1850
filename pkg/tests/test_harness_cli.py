import copy
import io
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conbed import harness
from conbed.cli import main
from conbed.errors import ConfigError, InvalidInputError

TOY = {
    "task": {"name": "toy_grid"},
    "constraint": {"kind": "transition", "delta": 0.2},
    "posterior": {"kind": "exact"},
    "method": {"name": "copex", "horizon": 1, "utility": "exact"},
    "T": 4,
    "seeds": [0, 1, 2],
    "metrics": {"spce_L": 2000},
}


def toy_cfg(tmp_path, **over):
    cfg = copy.deepcopy(TOY)
    cfg["output_dir"] = str(tmp_path / "out")
    cfg.update(over)
    return cfg


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def fake_result(path, seed, value, chash="abc", method="m", x=0.1, extra=None):
    metrics = {"spce": value, "total_cost": 0.0, **(extra or {})}
    lines = [
        {"type": "header", "version": 1, "config_hash": chash, "seed": seed, "method": method, "x": x,
         "task": "toy", "anchor": [0.0], "theta_true": None},
        {"type": "summary", "status": "complete", "n_steps": 0, "metrics": metrics},
    ]
    Path(path).write_text("".join(json.dumps(line) + "\n" for line in lines))
    return path


# --------------------------------------------------------------------------- configs


def test_schema_rejects_unknown_keys():
    cfg = copy.deepcopy(TOY)
    cfg["method"]["horizn"] = 2
    with pytest.raises(ConfigError):
        harness.validate_config(cfg)
    cfg = copy.deepcopy(TOY)
    cfg["extra"] = 1
    with pytest.raises(ConfigError):
        harness.validate_config(cfg)


def test_task_method_mismatch():
    cfg = copy.deepcopy(TOY)
    cfg["method"] = {"name": "gp_us"}
    with pytest.raises(ConfigError):
        harness.validate_config(cfg)
    cfg = copy.deepcopy(TOY)
    cfg["posterior"] = {"kind": "network"}
    with pytest.raises(ConfigError):
        harness.validate_config(cfg)


def test_config_hash_ignores_seeds_and_output():
    a = copy.deepcopy(TOY)
    b = dict(copy.deepcopy(TOY), seeds=[5], output_dir="elsewhere")
    assert harness.config_hash(a) == harness.config_hash(b)
    c = copy.deepcopy(TOY)
    c["T"] = 5
    assert harness.config_hash(a) != harness.config_hash(c)


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("CONBED_OUTPUT_ROOT", str(tmp_path))
    assert harness.output_dir({"output_dir": "runs"}) == tmp_path / "runs"


# --------------------------------------------------------------------------- running


def test_run_files_schema_and_idempotence(tmp_path):
    cfg = toy_cfg(tmp_path)
    s1 = harness.run(cfg)
    out = Path(cfg["output_dir"])
    files = sorted(out.glob("seed_*.jsonl"))
    assert len(files) == 3
    assert (out / "summary.json").exists() and (out / "summary.csv").exists()
    for f in files:
        harness.validate_result(f)
        r = harness.read_result(f)
        costs = [s["cumulative_cost"] for s in r["steps"]]
        assert costs == sorted(costs) and len(r["steps"]) <= cfg["T"]
        assert r["header"]["config_hash"] == harness.config_hash(cfg)
    stamps = {f: f.stat().st_mtime_ns for f in files}
    s2 = harness.run(cfg)
    assert s1 == s2
    assert {f: f.stat().st_mtime_ns for f in files} == stamps


def test_corrupt_seed_is_rerun(tmp_path):
    cfg = toy_cfg(tmp_path)
    harness.run(cfg)
    out = Path(cfg["output_dir"])
    target = out / "seed_0001.jsonl"
    good = target.read_bytes()
    others = {p: p.stat().st_mtime_ns for p in out.glob("seed_000[02].jsonl")}
    target.write_bytes(good[: len(good) // 2])
    harness.run(cfg)
    assert target.read_bytes() == good
    assert {p: p.stat().st_mtime_ns for p in others} == others


def test_rerun_is_byte_identical(tmp_path):
    cfg = toy_cfg(tmp_path, seeds=[4])
    path = harness.run_seed(cfg, 4, tmp_path / "a")
    again = harness.run_seed(cfg, 4, tmp_path / "b")
    assert path.read_bytes() == again.read_bytes()


# --------------------------------------------------------------------------- aggregation


def test_aggregate_two_runs(tmp_path):
    files = [fake_result(tmp_path / "a.jsonl", 0, 4.0), fake_result(tmp_path / "b.jsonl", 1, 6.0)]
    s = harness.aggregate(files)["groups"][0]["metrics"]["spce"]
    assert s["mean"] == 5.0
    assert s["half_width"] == pytest.approx(12.706, abs=1e-3)


def test_aggregate_identical_runs_zero_width(tmp_path):
    files = [fake_result(tmp_path / f"{i}.jsonl", i, 0.3) for i in range(3)]
    s = harness.aggregate(files)["groups"][0]["metrics"]["spce"]
    assert s["half_width"] == 0.0 and s["ci_low"] == s["ci_high"] == 0.3


def test_aggregate_mixed_hashes(tmp_path):
    files = [fake_result(tmp_path / "a.jsonl", 0, 1.0, chash="h1"), fake_result(tmp_path / "b.jsonl", 1, 2.0, chash="h2")]
    with pytest.raises(InvalidInputError):
        harness.aggregate(files)


def test_aggregate_order_invariant(tmp_path):
    files = [fake_result(tmp_path / f"{i}.jsonl", i, float(i) ** 1.5, method=f"m{i % 2}") for i in range(6)]
    assert harness.aggregate(files) == harness.aggregate(files[::-1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 5), min_size=2, max_size=10), st.lists(st.floats(0, 3), min_size=2, max_size=10))
def test_cost_interpolation_preserves_monotonicity(steps, drops):
    n = min(len(steps), len(drops))
    costs = np.concatenate([[0.0], np.cumsum(steps[:n])])
    values = 10.0 - np.concatenate([[0.0], np.cumsum(drops[:n])])
    grid = harness.cost_grid(costs[-1], 17)
    out = harness.interp_curve(costs, values, grid)
    assert np.all(np.diff(out) <= 1e-12)


def test_rmse_curves_share_cost_grid(tmp_path):
    files = []
    for i, scale in enumerate([1.0, 2.0]):
        extra = {"rmse": [3.0, 2.0, 1.0], "cost": [0.0, scale, 2 * scale], "rmse_final": 1.0}
        files.append(fake_result(tmp_path / f"{i}.jsonl", i, 0.0, extra=extra))
    g = harness.aggregate(files, cost_grid_points=5)["groups"][0]
    assert g["curve"]["x"] == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert g["curve"]["mean"][-1] == pytest.approx((1.0 + 2.0) / 2)


# --------------------------------------------------------------------------- plot data


def test_plot_data_schema_and_round_trip(tmp_path):
    files = [fake_result(tmp_path / f"{m}{x}{i}.jsonl", i, v, method=m, x=x, chash=f"{m}{x}")
             for m in ("copex_H2", "random_design") for x in (0.05, 0.1, 0.2) for i, v in enumerate([1.0, 1.5, 2.5])]
    summary = harness.aggregate(files)
    paths = harness.emit_plot_data(summary, tmp_path / "plots", {1: {"mean": 0.1, "ci_low": 0.05, "ci_high": 0.15}})
    final = tmp_path / "plots" / "final_metric.csv"
    assert final in paths
    header = final.read_text().splitlines()[0].split(",")
    assert header == ["method", "x", "mean", "ci_low", "ci_high"]
    rows = harness.read_plot_data(final)
    assert len(rows) == 2 * 3
    by_key = {(g["method"], g["x"]): g["metrics"]["spce"] for g in summary["groups"]}
    for r in rows:
        s = by_key[(r["method"], r["x"])]
        assert (r["mean"], r["ci_low"], r["ci_high"]) == (s["mean"], s["ci_low"], s["ci_high"])
    assert harness.read_plot_data(tmp_path / "plots" / "runtime_vs_h.csv")[0]["x"] == 1.0


# --------------------------------------------------------------------------- sessions


def test_session_replays_run(tmp_path):
    cfg = toy_cfg(tmp_path, seeds=[2])
    res = harness.read_result(harness.run_seed(cfg, 2, tmp_path / "r"))
    obs = "".join(f"{s['observation']!r}\n" for s in res["steps"])
    fout = io.StringIO()
    hist = harness.session(cfg, 2, io.StringIO(obs), fout)
    assert [h["design"] for h in hist] == [s["design"] for s in res["steps"]]
    events = [json.loads(line) for line in fout.getvalue().splitlines()]
    assert events[-1]["event"] == "done"
    assert "posterior" in events[0] and "remaining_budget" in events[0]


def test_session_rejects_bad_lines_and_saves_on_eof(tmp_path):
    cfg = toy_cfg(tmp_path)
    sess = tmp_path / "session.json"
    fout = io.StringIO()
    harness.session(cfg, 0, io.StringIO("abc\n0.4\n"), fout, sess)
    events = [json.loads(line)["event"] for line in fout.getvalue().splitlines()]
    assert events == ["propose", "error", "propose", "eof"]
    saved = json.loads(sess.read_text())
    assert len(saved["history"]) == 1
    fout2 = io.StringIO()
    hist = harness.session(cfg, 0, io.StringIO("0.1\n0.2\n0.3\n"), fout2, sess)
    assert len(hist) == 4
    assert hist[0]["observation"] == 0.4


def test_session_ces_out_of_range(tmp_path):
    cfg = {"task": {"name": "ces"}, "constraint": {"kind": "budget", "budget": 100, "cost": "sum_abs_diff"},
           "method": {"name": "random_design"}, "T": 3, "seeds": [0]}
    fout = io.StringIO()
    hist = harness.session(cfg, 0, io.StringIO("1.0\n0.5\n"), fout)
    events = [json.loads(line) for line in fout.getvalue().splitlines()]
    assert events[1]["event"] == "error"
    assert hist[0]["observation"] == 0.5


# --------------------------------------------------------------------------- CLI


def test_cli_exit_codes(tmp_path, capsys):
    good = write_cfg(tmp_path, toy_cfg(tmp_path, seeds=[0], T=2))
    assert main(["validate-config", "--config", str(good)]) == 0
    bad = dict(TOY, bogus=True)
    assert main(["validate-config", "--config", str(write_cfg(tmp_path, bad, "bad.json"))]) == 2
    missing = toy_cfg(tmp_path, posterior={"kind": "network", "checkpoint": str(tmp_path / "none.json")})
    assert main(["run", "--config", str(write_cfg(tmp_path, missing, "missing.json"))]) == 2
    assert not Path(missing["output_dir"]).exists()
    assert main(["plot-data", str(tmp_path / "nope.json"), "--out", str(tmp_path / "p")]) == 3


def test_cli_run_aggregate_plot(tmp_path, capsys):
    cfg = toy_cfg(tmp_path, seeds=2, T=2)
    path = write_cfg(tmp_path, cfg)
    assert main(["run", "--config", str(path), "--jobs", "2"]) == 0
    out = Path(cfg["output_dir"])
    assert main(["aggregate", str(out), "--out", str(tmp_path / "agg")]) == 0
    assert main(["plot-data", str(tmp_path / "agg" / "summary.json"), "--out", str(tmp_path / "plots"),
                 "--timing-dirs", str(out)]) == 0
    assert (tmp_path / "plots" / "final_metric.csv").exists()
    assert (tmp_path / "plots" / "runtime_vs_h.csv").exists()
