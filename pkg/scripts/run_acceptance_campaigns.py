"""Fill the acceptance-suite cache (artifacts/acceptance) ahead of running pytest.

Each group is resumable: finished seeds are skipped, so the script can be interrupted
and restarted.  Groups run in the order given on the command line.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import campaigns as C  # noqa: E402


def lf():
    for delta in C.DELTAS:
        for method in ("random_design", "copex_H0", "copex_H2"):
            yield f"lf {method} delta={delta}", C.lf_cfg(method, delta)


def ces():
    for budget, method in ((100, "copex_H0"), (100, "copex_H1"), (150, "copex_H0")):
        yield f"ces {method} B={budget}", C.ces_cfg(method, budget)


def al():
    for method in ("gp_rs", "gp_us", "copex_H1"):
        yield f"al {method}", C.al_cfg(method)


GROUPS = {"lf": lf, "ces": ces, "al": al}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("groups", nargs="*", default=["mmd", "runtime", "ces", "al", "lf"],
                   choices=["mmd", "runtime", *GROUPS])
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for group in args.groups:
        t0 = time.time()
        if group == "mmd":
            C.mmd_by_depth()
        elif group == "runtime":
            C.runtime_vs_horizon()
        else:
            for name, cfg in GROUPS[group]():
                t1 = time.time()
                C.harness.validate_config(cfg)
                C.harness.run(cfg, jobs=args.jobs)
                logging.info("%s done in %.0f s", name, time.time() - t1)
        logging.info("group %s done in %.0f s", group, time.time() - t0)


if __name__ == "__main__":
    main()
