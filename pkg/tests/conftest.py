import itertools
from fractions import Fraction

import numpy as np


def enumeration_grid(ub):
    """All integer points of the box [0,ub] as an (N, d) array."""
    axes = [np.arange(int(u) + 1) for u in ub]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def exact_objective(inst, r):
    return sum(Fraction(float(inst.c[j])) * int(r[j])
               + Fraction(1, 2) * int(inst.qdiag[j]) * int(r[j]) ** 2
               for j in range(len(r)))


def enumerate_optimum(inst):
    """Exhaustive-enumeration oracle: exact optimal objective and tie-broken point.

    Feasibility and a float pre-screen are vectorized; the final comparison
    among near-minimal points is redone in exact rational arithmetic.
    """
    pts = enumeration_grid(inst.ub)
    lhs = pts @ inst.A.T  # integer
    feasible = (lhs <= inst.b[None, :]).all(axis=1)
    pts = pts[feasible]
    obj = pts @ inst.c + 0.5 * (pts.astype(float) ** 2) @ inst.qdiag.astype(float)
    near = pts[obj <= obj.min() + 1e-6]
    best = None
    for r in near:
        key = (exact_objective(inst, r), int(r[:inst.n_swaps].sum()), tuple(int(v) for v in r))
        if best is None or key < best:
            best = key
    return best
