"""Recover eta^2 (A1 - A2) for a single-mode divergence-free difference.

Usage: python demos/reconstruct_convection.py [lam]
The acceptance setting (65 x 65 x 128, lambda 32) takes about a minute and a half.
"""

import sys

from cdlab.config import DEFAULT_STREAM
from cdlab.fields import CoefficientPair, Expression, VectorField, make_divfree_field
from cdlab.grid import build_grid
from cdlab.reconstruction import FourierLattice, reconstruct_A


def main(lam="32"):
    g = build_grid(2, 65, 128, 1.5)
    A = make_divfree_field(DEFAULT_STREAM)
    known = CoefficientPair(VectorField.zero(2), Expression("0.5", 2))
    hidden = CoefficientPair(A.scale(-1.0), Expression("0.5", 2))
    rec = reconstruct_A(known, hidden, FourierLattice(1.5, 2, 6, 2.3), g, lam=float(lam), truth=A)
    for key in ("n_frequencies", "n_directions", "min_abs_det", "rel_l2_error", "runtime_s"):
        print(f"{key:>14}: {rec.report[key]}")


if __name__ == "__main__":
    main(*sys.argv[1:])
