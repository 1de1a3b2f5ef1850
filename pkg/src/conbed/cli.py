"""Command-line entry point: ``conbed <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import CheckpointError, ConfigError, InvalidInputError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _cmd_train(args):
    from .posterior import NetworkConfig, TrainConfig, save_checkpoint, train
    from .tasks import make_task

    options = json.loads(args.task_options) if args.task_options else {}
    task = make_task(args.task, **options)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                      max_len=args.max_len, checkpoint_every=max(1, min(args.checkpoint_every, args.epochs)),
                      network=NetworkConfig(args.embed_dim, args.hidden_dim, args.components))

    def progress(epoch, loss):
        logging.info("epoch %d  loss %.4f", epoch, loss)

    net = train(task, cfg, progress)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, args.out)
    print(json.dumps({"checkpoint": str(args.out), "final_loss": net.meta["loss_trace"][-1]}))
    return EXIT_OK


def _load(args):
    cfg = harness.load_config(args.config)
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = args.output_dir
    return cfg


def _cmd_run(args):
    cfg = _load(args)
    seeds = [args.seed] if args.seed is not None else None
    summary = harness.run(cfg, jobs=args.jobs, seeds=seeds)
    for g in summary["groups"]:
        stats = {k: round(v["mean"], 4) for k, v in g["metrics"].items()}
        print(json.dumps({"method": g["method"], "x": g["x"], "n_runs": g["n_runs"], **stats}))
    return EXIT_OK


def _result_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("seed_*.jsonl")) if p.is_dir() else [p])
    return files


def _cmd_aggregate(args):
    summary = harness.aggregate(_result_files(args.paths), cost_grid_points=args.cost_grid_points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_summary(summary, out)
    print(str(out / "summary.json"))
    return EXIT_OK


def _cmd_plot_data(args):
    summary = json.loads(Path(args.summary).read_text())
    runtimes = harness.timing_summary(args.timing_dirs) if args.timing_dirs else None
    for p in harness.emit_plot_data(summary, args.out, runtimes):
        print(str(p))
    return EXIT_OK


def _cmd_session(args):
    cfg = _load(args)
    seed = args.seed if args.seed is not None else harness.seed_list(cfg)[0]
    harness.session(cfg, seed, sys.stdin, sys.stdout, args.session_file)
    return EXIT_OK


def _cmd_validate(args):
    cfg = harness.load_config(args.config)
    print(json.dumps({"valid": True, "config_hash": harness.config_hash(cfg)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conbed", description="Constrained sequential experimental design")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-posterior", help="train an amortized posterior and write a checkpoint")
    t.add_argument("--task", required=True)
    t.add_argument("--task-options", help="JSON object of task keyword arguments")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=20000)
    t.add_argument("--batch-size", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--max-len", type=int)
    t.add_argument("--embed-dim", type=int, default=32)
    t.add_argument("--hidden-dim", type=int, default=64)
    t.add_argument("--components", type=int, default=10)
    t.add_argument("--checkpoint-every", type=int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("run", help="run every seed of a campaign config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, help="run only this seed")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--output-dir")
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("aggregate", help="summarise result files or directories")
    a.add_argument("paths", nargs="+")
    a.add_argument("--out", required=True)
    a.add_argument("--cost-grid-points", type=int, default=21)
    a.set_defaults(func=_cmd_aggregate)

    d = sub.add_parser("plot-data", help="write plot-ready CSVs from a summary")
    d.add_argument("summary")
    d.add_argument("--out", required=True)
    d.add_argument("--timing-dirs", nargs="*")
    d.set_defaults(func=_cmd_plot_data)

    s = sub.add_parser("session", help="interactive propose/observe loop on stdin/stdout")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--session-file")
    s.set_defaults(func=_cmd_session)

    v = sub.add_parser("validate-config", help="check a campaign config against the schema")
    v.add_argument("--config", required=True)
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command in ("validate-config", "aggregate") else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - map every other failure to the runtime exit code
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
