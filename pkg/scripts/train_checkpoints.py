"""Train the desk-scale posterior checkpoints used by the campaign scripts and acceptance suite."""
import argparse
import logging
import time
from pathlib import Path

from conbed.posterior import TrainConfig, save_checkpoint, train
from conbed.tasks import make_task

ROOT = Path(__file__).resolve().parent.parent / "artifacts"

PLANS = {
    "conjugate_gaussian": dict(epochs=3000, max_len=10),
    "location_finding": dict(epochs=20000),
    "ces": dict(epochs=20000),
    "al:branin:hazard_center": dict(epochs=10000),
}


def checkpoint_path(task_name: str) -> Path:
    return ROOT / f"posterior_{task_name.replace(':', '_')}.json"


def main():
    p = argparse.ArgumentParser()
    p.add_argument("tasks", nargs="*", default=list(PLANS))
    p.add_argument("--force", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    ROOT.mkdir(exist_ok=True)
    for name in args.tasks:
        out = checkpoint_path(name)
        if out.exists() and not args.force:
            logging.info("%s exists, skipping", out)
            continue
        t0 = time.time()
        net = train(make_task(name), TrainConfig(**PLANS[name]),
                    lambda e, loss, n=name: logging.info("%s epoch %d loss %.4f", n, e, loss))
        save_checkpoint(net, out)
        logging.info("%s done in %.0f s", name, time.time() - t0)


if __name__ == "__main__":
    main()
