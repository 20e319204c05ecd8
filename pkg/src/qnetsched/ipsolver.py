"""Exact solver for the small integer programs issued every time step.

Instances have the shape min c.r + 1/2 r^T diag(q) r subject to A r <= b,
0 <= r <= ub, r integer, with A integer and the origin always feasible.

Small instances are solved by a depth-first branch and bound with an
admissible separable bound (exact, including the lexicographic tie-break).
Larger ones first try a two-phase LP fast path: the relaxation of these
scheduling programs is almost always integral, so phase one certifies the
optimal value and phase two minimizes the swap count at that value. Both
phases are verified in exact scaled-integer arithmetic (floats are dyadic
rationals, so the scaling is lossless); any numeric doubt falls back to
the branch and bound, warm-started with the certified point. LP numerics
can therefore cost time, never correctness.

Tie-break contract: the returned decision always attains the exact optimal
objective and, when `optimal` is reported, the exact minimal total swap
count among optima. The lexicographically-smallest refinement is only
guaranteed on the exhaustive small-instance path.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

try:
    from scipy.optimize import linprog as _linprog
except ImportError:  # pragma: no cover - scipy is a soft dependency
    _linprog = None

DEFAULT_NODE_BUDGET = 10**6
DEFAULT_TIME_BUDGET = 0.1  # seconds

# box volumes (log2) below this are cheaper to enumerate than to hand to an LP
SMALL_SPACE = 12.0
# LP relaxation bounds inside the fallback search, on subtrees at least this big
LP_SPACE_THRESHOLD = 16.0
# accept an LP-certified integer point only when it matches the LP value to
# well under one objective-lattice unit (scaled); LP error is ~1e-9 relative
CERT_SLACK = 0.3
# quadratic objective blow-up guard for the piecewise-linear LP encoding
MAX_SEGMENTS = 4000


class SolverInternalError(RuntimeError):
    """The zero vector was infeasible, which the instance invariants forbid."""


@dataclass
class IPInstance:
    """One integer program: objective, diagonal quadratic, constraints, bounds.

    Negative right-hand sides are clamped to zero on construction so the
    zero decision always stays feasible; a negative availability estimate
    simply means nothing can be scheduled against that row.
    """

    c: np.ndarray
    qdiag: np.ndarray
    A: np.ndarray
    b: np.ndarray
    ub: np.ndarray
    n_swaps: int = 0  # leading variables counted by the minimal-swaps tie-break

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.qdiag = np.asarray(self.qdiag, dtype=np.int64)
        self.A = np.asarray(self.A, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=float)
        self.ub = np.asarray(self.ub, dtype=np.int64)
        d = self.c.shape[0]
        if self.A.shape != (self.b.shape[0], d) or self.ub.shape[0] != d:
            raise ValueError("inconsistent instance dimensions")
        if (self.qdiag < 0).any():
            raise ValueError("quadratic diagonal must be nonnegative")
        if (self.ub < 0).any():
            raise ValueError("upper bounds must be nonnegative")


@dataclass
class SolveResult:
    r: np.ndarray
    objective: float
    optimal: bool
    nodes: int
    objective_exact: Fraction = Fraction(0)


def _floor_rhs(b: np.ndarray) -> np.ndarray:
    # Ar is integer, so Ar <= b is equivalent to Ar <= floor(b); the floor
    # is taken exactly through Fraction to dodge float-boundary surprises.
    out = np.empty(b.shape[0], dtype=np.int64)
    for i, v in enumerate(b):
        out[i] = math.floor(Fraction(float(v)))
    return np.maximum(out, 0)


def _scaled_costs(c: np.ndarray, qdiag: np.ndarray):
    """Represent the objective as integers: scale*obj = cint.r + denom*q*r^2."""
    fracs = [Fraction(float(v)) for v in c]
    denom = 1
    for f in fracs:
        denom = denom * f.denominator // math.gcd(denom, f.denominator)
    scale = 2 * denom
    cint = [int(f * scale) for f in fracs]
    return cint, denom, scale


def tighten_bounds(A: np.ndarray, b: np.ndarray, ub: np.ndarray,
                   max_rounds: int = 64) -> np.ndarray:
    """Shrink per-variable bounds using optimistic row slack, to a fixed point.

    For each row i and variable j with A[i,j] > 0, every feasible point obeys
    A[i,j]*r_j <= b_i - sum_k min(0, A[i,k])*ub_k, which often collapses the
    search space drastically when the instance encodes a swap cascade.
    """
    ub = ub.astype(np.int64).copy()
    pos = A > 0
    if not pos.any():
        return ub
    for _ in range(max_rounds):
        neg = np.minimum(A, 0) @ ub
        slack = b - neg
        changed = False
        for j in range(A.shape[1]):
            rows = pos[:, j]
            if not rows.any():
                continue
            cap = int(np.min(slack[rows] // A[rows, j]))
            if cap < ub[j]:
                ub[j] = max(cap, 0)
                changed = True
        if not changed:
            break
    return ub


class _Problem:
    """Preprocessed instance shared by the search paths."""

    def __init__(self, inst: IPInstance):
        self.inst = inst
        self.d = inst.c.shape[0]
        self.b = _floor_rhs(inst.b)
        if (self.b < 0).any():
            raise SolverInternalError("zero decision infeasible after clamping")
        self.A = inst.A
        self.ub = tighten_bounds(self.A, self.b, inst.ub)
        self.cint, self.denom, self.scale = _scaled_costs(inst.c, inst.qdiag)
        self.q = [int(v) for v in inst.qdiag]
        self.swap_mask = np.zeros(self.d, dtype=bool)
        self.swap_mask[:inst.n_swaps] = True
        self.log_space = float(np.log2(self.ub.astype(float) + 1.0).sum())

    def contrib(self, j: int, v) -> int:
        v = int(v)  # keep the arithmetic in unbounded Python ints
        return self.cint[j] * v + self.denom * self.q[j] * v * v

    def exact_objective_scaled(self, r: np.ndarray) -> int:
        return sum(self.contrib(j, r[j]) for j in range(self.d))

    def feasible(self, r: np.ndarray) -> bool:
        if (r < 0).any() or (r > self.ub).any():
            return False
        return bool((self.A @ r <= self.b).all())

    def result(self, r: np.ndarray, optimal: bool, nodes: int) -> SolveResult:
        exact = Fraction(self.exact_objective_scaled(r), self.scale)
        return SolveResult(r.astype(np.int64), float(exact), optimal, nodes, exact)


def solve(inst: IPInstance, node_budget: int = DEFAULT_NODE_BUDGET,
          time_budget: float | None = DEFAULT_TIME_BUDGET,
          use_lp: bool = True) -> SolveResult:
    """Find the exact minimizer, breaking ties toward the fewest total swaps.

    Exhausting the node or time budget returns the best decision found so
    far with optimal=False. The zero vector is feasible by construction and
    seeds the incumbent, so a decision is always returned.
    """
    if inst.c.shape[0] == 0:
        return SolveResult(np.zeros(0, dtype=np.int64), 0.0, True, 0)
    prob = _Problem(inst)
    lp_ok = use_lp and _linprog is not None and prob.A.size > 0
    if not lp_ok or prob.log_space <= SMALL_SPACE:
        return _dfs(prob, node_budget, time_budget, exact_lex=True, use_lp=False)
    fast = _lp_two_phase(prob)
    if fast is not None:
        return fast
    warm = _lp_warm_point(prob)
    return _dfs(prob, node_budget, time_budget, exact_lex=False, use_lp=True,
                warm=warm)


# ---------------------------------------------------------------------------
# LP fast path


def _expanded_columns(prob: _Problem):
    """Piecewise-linear encoding: quadratic variables become unit segments.

    Convex slopes increase along the segments, so any LP optimum fills them
    in order and the recovered integer sum is meaningful.
    """
    cols_c, cols_ub, cols_var, cols_swap = [], [], [], []
    for j in range(prob.d):
        cj = float(prob.inst.c[j])
        if prob.q[j] == 0 or prob.ub[j] == 0:
            cols_c.append(cj)
            cols_ub.append(float(prob.ub[j]))
            cols_var.append(j)
            cols_swap.append(bool(prob.swap_mask[j]))
        else:
            for k in range(1, int(prob.ub[j]) + 1):
                cols_c.append(cj + prob.q[j] * (2 * k - 1) / 2.0)
                cols_ub.append(1.0)
                cols_var.append(j)
                cols_swap.append(bool(prob.swap_mask[j]))
    return (np.array(cols_c), np.array(cols_ub), np.array(cols_var),
            np.array(cols_swap, dtype=bool))


def _recover(prob: _Problem, x: np.ndarray, cols_var: np.ndarray) -> np.ndarray | None:
    # the tolerance is a performance knob only: every recovered point is
    # re-verified in exact arithmetic, so rounding a genuinely fractional
    # vertex can only lead to fallback, never to a wrong answer
    r = np.zeros(prob.d)
    np.add.at(r, cols_var, x)
    ri = np.rint(r)
    if not np.allclose(r, ri, atol=1e-2):
        return None
    ri = ri.astype(np.int64)
    if not prob.feasible(ri):
        return None
    return ri


def _lp_two_phase(prob: _Problem) -> SolveResult | None:
    n_seg = int(prob.ub[np.asarray(prob.q) != 0].sum()) if any(prob.q) else 0
    if n_seg > MAX_SEGMENTS:
        return None
    cols_c, cols_ub, cols_var, cols_swap = _expanded_columns(prob)
    A_exp = prob.A[:, cols_var]
    bounds = np.zeros((cols_c.shape[0], 2))
    bounds[:, 1] = cols_ub
    res1 = _linprog(cols_c, A_ub=A_exp, b_ub=prob.b, bounds=bounds, method="highs")
    if res1.status != 0:
        return None
    r1 = _recover(prob, res1.x, cols_var)
    if r1 is None:
        return None
    v1 = prob.exact_objective_scaled(r1)
    # certify optimality: the point's exact value must sit within a fraction
    # of one objective-lattice unit of the LP lower bound
    if abs(v1 - res1.fun * prob.scale) > CERT_SLACK:
        return None
    # phase two: minimize total swaps subject to staying on the optimal
    # value; the slack is just wide enough for dot-product noise and far
    # too narrow to trade a visible swap fraction for objective. The winner
    # is re-verified exactly, so a bad tolerance can only cause fallback.
    obj2 = cols_swap.astype(float)
    if not obj2.any():
        return prob.result(r1, True, 0)
    v1_float = v1 / prob.scale
    slack = 1e-6 + 1e-9 * abs(v1_float)
    A2 = np.vstack([A_exp, cols_c[None, :]])
    b2 = np.concatenate([prob.b.astype(float), [v1_float + slack]])
    res2 = _linprog(obj2, A_ub=A2, b_ub=b2, bounds=bounds, method="highs")
    if res2.status != 0:
        return None
    r2 = _recover(prob, res2.x, cols_var)
    if r2 is None:
        return None
    if prob.exact_objective_scaled(r2) != v1:
        return None
    s2 = int(r2[prob.swap_mask].sum())
    # res2.fun lower-bounds the swap count over a superset of the optima;
    # the verified point lands within rounding of it, so it is the minimum
    if s2 - res2.fun > 0.4:
        return None
    return prob.result(r2, True, 0)


def _lp_warm_point(prob: _Problem) -> np.ndarray | None:
    """A feasible integer point from the plain LP, to seed the fallback search."""
    res = _linprog(prob.inst.c, A_ub=prob.A, b_ub=prob.b,
                   bounds=np.stack([np.zeros(prob.d), prob.ub.astype(float)], axis=1),
                   method="highs")
    if res.status != 0:
        return None
    ri = np.rint(res.x).astype(np.int64)
    if not prob.feasible(ri):
        return None
    return ri


# ---------------------------------------------------------------------------
# Branch and bound


def _dfs(prob: _Problem, node_budget: int, time_budget: float | None,
         exact_lex: bool, use_lp: bool, warm: np.ndarray | None = None) -> SolveResult:
    d, A, b, ub = prob.d, prob.A, prob.b, prob.ub
    contrib = prob.contrib

    def best_value(j: int) -> int:
        if prob.q[j] == 0:
            return int(ub[j]) if prob.cint[j] < 0 else 0
        lo = -prob.cint[j] / (2 * prob.denom * prob.q[j])
        cands = {0, int(ub[j]), min(max(int(math.floor(lo)), 0), int(ub[j])),
                 min(max(int(math.ceil(lo)), 0), int(ub[j]))}
        return min(cands, key=lambda v: (contrib(j, v), v))

    minval = [contrib(j, best_value(j)) for j in range(d)]
    order = sorted(range(d), key=lambda j: (minval[j], j))
    suffix_min = [0] * (d + 1)
    for p in range(d - 1, -1, -1):
        suffix_min[p] = suffix_min[p + 1] + minval[order[p]]

    Aneg = np.minimum(A, 0)
    n_rows = A.shape[0]
    neg_suffix = np.zeros((d + 1, n_rows), dtype=np.int64)
    log_space = [0.0] * (d + 1)
    for p in range(d - 1, -1, -1):
        j = order[p]
        neg_suffix[p] = neg_suffix[p + 1] + Aneg[:, j] * ub[j]
        log_space[p] = log_space[p + 1] + math.log2(int(ub[j]) + 1)

    lp_ready = use_lp and _linprog is not None and A.size > 0
    if lp_ready:
        tangents = np.where(prob.inst.qdiag > 0, ub / 2.0, 0.0)
        c_lp = prob.inst.c + prob.inst.qdiag * tangents
        lp_const = float(-0.5 * (prob.inst.qdiag * tangents ** 2).sum())
        order_arr = np.array(order)

    best_r = np.zeros(d, dtype=np.int64)
    best_obj = 0
    best_swaps = 0
    if warm is not None:
        best_r = warm.copy()
        best_obj = prob.exact_objective_scaled(warm)
        best_swaps = int(warm[prob.swap_mask].sum())
        zero = (0, 0)
        if (best_obj, best_swaps) > zero:
            best_r = np.zeros(d, dtype=np.int64)
            best_obj = best_swaps = 0
    nodes = 0
    aborted = False
    deadline = None if time_budget is None else time.monotonic() + time_budget

    r = np.zeros(d, dtype=np.int64)
    lhs = np.zeros(n_rows, dtype=np.int64)

    def consider_leaf(obj: int, swaps: int):
        nonlocal best_obj, best_swaps, best_r
        if obj > best_obj:
            return
        if obj == best_obj:
            if swaps > best_swaps:
                return
            if swaps == best_swaps and (not exact_lex or tuple(r) >= tuple(best_r)):
                return
        best_obj, best_swaps = obj, swaps
        best_r = r.copy()

    def too_weak(obj: int, swaps: int, bound: int) -> bool:
        if bound > best_obj:
            return True
        if bound == best_obj:
            deficit = int(np.maximum(lhs - b, 0).sum())
            total = swaps + deficit
            if total > best_swaps:
                return True
            if not exact_lex and total >= best_swaps:
                # plateau pruning: cannot strictly improve the swap count
                return True
        return False

    def lp_bound(p: int) -> int | None:
        free = order_arr[p:]
        res = _linprog(c_lp[free], A_ub=A[:, free], b_ub=b - lhs,
                       bounds=[(0, int(ub[j])) for j in free], method="highs")
        if res.status != 0:
            return None
        val = res.fun + lp_const
        margin = 1e-9 + 1e-6 * abs(val)
        return math.ceil((val - margin) * prob.scale)

    def dfs(p: int, obj: int, swaps: int):
        nonlocal nodes, aborted
        if aborted:
            return
        nodes += 1
        if nodes > node_budget or (deadline is not None and nodes % 256 == 0
                                   and time.monotonic() > deadline):
            aborted = True
            return
        if p == d:
            consider_leaf(obj, swaps)
            return
        if too_weak(obj, swaps, obj + suffix_min[p]):
            return
        if lp_ready and log_space[p] > LP_SPACE_THRESHOLD:
            lb = lp_bound(p)
            if lb is not None and too_weak(obj, swaps, obj + lb):
                return
        j = order[p]
        col = A[:, j]
        rest = neg_suffix[p + 1]
        vmax = int(ub[j])
        rows = col > 0
        if rows.any():
            caps = (b[rows] - lhs[rows] - rest[rows]) // col[rows]
            vmax = min(vmax, int(caps.min()))
        if vmax < 0:
            return
        extra = 1 if prob.swap_mask[j] else 0
        for v in sorted(range(vmax + 1), key=lambda v: (contrib(j, v), v)):
            newlhs = lhs + col * v
            if (newlhs + rest > b).any():
                continue
            r[j] = v
            lhs[:] = newlhs
            dfs(p + 1, obj + contrib(j, v), swaps + extra * v)
            lhs[:] = newlhs - col * v
            r[j] = 0
            if aborted:
                return

    dfs(0, 0, 0)
    return prob.result(best_r, not aborted, nodes)


# ---------------------------------------------------------------------------
# Debug dump format: one instance per file, objective row then constraints.


def dump_instance(inst: IPInstance) -> str:
    lines = [f"vars {inst.c.shape[0]} swaps {inst.n_swaps}"]
    lines.append("obj " + " ".join(repr(float(v)) for v in inst.c))
    lines.append("quad " + " ".join(str(int(v)) for v in inst.qdiag))
    lines.append("ub " + " ".join(str(int(v)) for v in inst.ub))
    for i in range(inst.A.shape[0]):
        row = " ".join(str(int(v)) for v in inst.A[i])
        lines.append(f"row {row} <= {float(inst.b[i])!r}")
    return "\n".join(lines) + "\n"


def parse_instance(text: str) -> IPInstance:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "vars":
        raise ValueError("instance dump must start with 'vars'")
    n_swaps = int(head[3]) if len(head) >= 4 else 0
    c = np.array([float(x) for x in lines[1].split()[1:]])
    qdiag = np.array([int(x) for x in lines[2].split()[1:]])
    ub = np.array([int(x) for x in lines[3].split()[1:]])
    rows, rhs = [], []
    for ln in lines[4:]:
        parts = ln.split()
        if parts[0] != "row" or parts[-2] != "<=":
            raise ValueError(f"bad constraint line: {ln!r}")
        rows.append([int(x) for x in parts[1:-2]])
        rhs.append(float(parts[-1]))
    A = np.array(rows, dtype=np.int64) if rows else np.zeros((0, c.shape[0]), dtype=np.int64)
    return IPInstance(c, qdiag, A, np.array(rhs), ub, n_swaps)
