"""Periodic Lloyd planning for a moving Gaussian density; prints the cost per iteration.

Usage: python demos/lloyd_periodic.py [out_dir]
"""

import sys

from covmpc.config import preset
from covmpc.coordinator import run_lloyd_periodic
from covmpc.plots import emit_plots


def main(out="demo_out/lloyd"):
    cfg = preset("lloyd_desk")
    fleet = cfg.fleet()
    log = run_lloyd_periodic(fleet)
    for k, c in enumerate(log.cost_trace):
        print(f"iteration {k:3d}  cost {c:.6f}")
    log.write(out)
    emit_plots(log, out, cfg.T, fleet.arena)


if __name__ == "__main__":
    main(*sys.argv[1:2])
