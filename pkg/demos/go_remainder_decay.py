"""Decay of the geometric-optics remainder in lambda, with a log-log plot.

Usage: python demos/go_remainder_decay.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from cdlab.experiments import plot_curves
from cdlab.fields import CoefficientPair, VectorField
from cdlab.go import CarlemanWeight, build_Bg, build_go_solution
from cdlab.grid import build_grid


def main(out_dir="demo_out"):
    g = build_grid(2, 65, 128, 1.5)
    pair = CoefficientPair.from_strings(["0", "0"], "0.5")
    B = build_Bg(VectorField.zero(2), VectorField.zero(2), (1.0, 0.0), 1.0, (0.0, 1.0), 0.3, g)
    lams = [8.0, 16.0, 32.0, 64.0]
    l2, h1 = [], []
    for lam in lams:
        sol = build_go_solution(pair, B, CarlemanWeight(lam, (1.0, 0.0)), "growing", g)
        l2.append(sol.remainder_norm(0))
        h1.append(sol.remainder_norm(1))
        print(f"lambda {lam:5.1f}: ||R||_L2 = {l2[-1]:.4e}, ||R||_L2H1 = {h1[-1]:.4e}")
    print(f"fitted L2 slope {np.polyfit(np.log(lams), np.log(l2), 1)[0]:.3f}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plot_curves(lams, {"L2": l2, "L2(H1)": h1}, "lambda", out / "remainder_decay.svg")
    print(f"plot written to {out / 'remainder_decay.svg'}")


if __name__ == "__main__":
    main(*sys.argv[1:])
