"""Periodic and nonperiodic coverage MPC side by side on the desk preset.

Usage: python demos/desk_modes.py [steps] [out_dir]
"""

import sys
from pathlib import Path

from covmpc.config import preset
from covmpc.coordinator import run_mpc
from covmpc.plots import emit_plots, moving_average


def main(steps=200, out="demo_out"):
    for name in ("periodic_desk", "nonperiodic_desk"):
        cfg = preset(name)
        fleet = cfg.fleet()
        log = run_mpc(fleet, steps=steps)
        d = Path(out) / name
        log.write(d)
        emit_plots(log, d, cfg.T, fleet.arena)
        ma = moving_average(log.coverage_costs, cfg.T)
        print(f"{name:18s} aborted={log.aborted} swaps={len(log.swap_times)} final MA cost={ma[-1]:.5f}")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(int(args[0]) if args else 200, args[1] if len(args) > 1 else "demo_out")
