"""Scheduling policies: greedy, max-weight, quadratic and round-robin.

A scheduling decision is a nonnegative integer vector over the operation
columns (swap transitions first, then one consumption entry per queue).
The optimization-based policies minimize a backlog-weighted objective under
the feasibility bounds appropriate to their information level; since swap
variables never appear in the objective, ties are broken toward the
decision with the fewest swaps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ipsolver
from .netmodel import TransitionSystem, _sorted_pair
from .stochproc import StepRealization, StochasticParams, SystemState

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class PolicyConfig:
    family: str  # greedy | maxweight | quadratic | roundrobin
    info: str = "FI"  # FI | PI | LI
    roundrobin_period: float = 0.0  # seconds
    tie_break_min_swaps: bool = True


@dataclass
class InfoSet:
    """What a scheduler is allowed to see when deciding.

    FI carries every realization, PI only the state snapshot plus averages,
    and LI(node) carries realizations for the queues touching that node.
    """

    level: str  # FI | PI | LI
    q: np.ndarray
    d: np.ndarray
    params: StochasticParams
    a: np.ndarray | None = None
    l: np.ndarray | None = None
    b: np.ndarray | None = None
    node: str | None = None
    t: int = 0


def make_info(level: str, state: SystemState, realization: StepRealization,
              params: StochasticParams, node: str | None = None) -> InfoSet:
    if level == "PI":
        return InfoSet("PI", state.q, state.d, params, t=state.t)
    if level == "FI":
        return InfoSet("FI", state.q, state.d, params,
                       a=realization.a, l=realization.l, b=realization.b, t=state.t)
    if level == "LI":
        if node is None:
            raise ConfigurationError("LI info needs the owning node")
        return InfoSet("LI", state.q, state.d, params,
                       a=realization.a, l=realization.l, b=realization.b,
                       node=node, t=state.t)
    raise ConfigurationError(f"unknown information level {level!r}")


def incident_mask(system: TransitionSystem, node: str) -> np.ndarray:
    return np.array([node in q for q in system.queues])


def effective_rhs(info: InfoSet, system: TransitionSystem):
    """Level-appropriate bounds on outgoing ebits and served demand.

    FI uses the exact end-of-step quantities; PI replaces losses and
    arrivals with their expectations (eta q + alpha dt on physical queues,
    beta dt on service queues); LI blends the two, exact on the queues
    incident to the owning node and expected elsewhere.
    """
    p = info.params
    exp_ebit = p.eta * info.q + p.arrival_mean
    exp_dem = info.d + p.traffic.beta * p.dt
    if info.level == "PI":
        return exp_ebit, exp_dem
    exact_ebit = (info.q - info.l + info.a).astype(float)
    exact_dem = (info.d + info.b).astype(float)
    if info.level == "FI":
        return exact_ebit, exact_dem
    mask = incident_mask(system, info.node)
    return (np.where(mask, exact_ebit, exp_ebit),
            np.where(mask, exact_dem, exp_dem))


def demand_estimate(info: InfoSet, system: TransitionSystem) -> np.ndarray:
    p = info.params
    expected = info.d + p.traffic.beta * p.dt
    if info.level == "PI":
        return expected
    exact = (info.d + info.b).astype(float)
    if info.level == "FI":
        return exact
    mask = incident_mask(system, info.node)
    return np.where(mask, exact, expected)


# ---------------------------------------------------------------------------
# Structure-aware variable bounds


def op_bounds(system: TransitionSystem, ebit_bound: np.ndarray,
              demand_bound: np.ndarray) -> np.ndarray:
    """Per-operation upper bounds from availability and downstream usefulness.

    Bottom-up pass (rank order) caps each swap by what its parents could
    ever hold; top-down pass caps swaps by the consumption they can feed,
    which keeps branch and bound small even when ebit queues are huge.
    """
    nt, nq = system.n_transitions, system.n_queues
    avail = np.floor(np.maximum(ebit_bound, 0.0)).astype(np.int64)
    total = int(avail.sum())
    reach = avail.astype(np.int64).copy()
    order = np.argsort(system.ranks[:nt], kind="stable")
    trans_ub = np.zeros(nt, dtype=np.int64)
    for c in order:
        p1, p2, child = system.swap_rows(int(c))
        cap = min(reach[p1], reach[p2], total)
        trans_ub[c] = cap
        reach[child] += cap
    cons_ub = np.minimum(reach, np.floor(np.maximum(demand_bound, 0.0)).astype(np.int64))
    useful = cons_ub.astype(np.int64).copy()
    for c in order[::-1]:
        p1, p2, child = system.swap_rows(int(c))
        tu = min(int(trans_ub[c]), int(useful[child]))
        trans_ub[c] = tu
        useful[p1] += tu
        useful[p2] += tu
    return np.concatenate([trans_ub, np.minimum(cons_ub, total)])


# expected-value weights carry float fractions (beta dt terms); snapping them
# to a dyadic lattice keeps the solver's exact-arithmetic certificates cheap
# while changing the heuristic weights by less than 2^-11
WEIGHT_LATTICE = 1024.0


def _instance(info: InfoSet, system: TransitionSystem, quadratic: bool) -> ipsolver.IPInstance:
    ebit_bound, demand_bound = effective_rhs(info, system)
    dhat = np.rint(demand_estimate(info, system) * WEIGHT_LATTICE) / WEIGHT_LATTICE
    nt, nq = system.n_transitions, system.n_queues
    c = np.zeros(nt + nq)
    c[nt:] = -dhat
    qdiag = np.zeros(nt + nq, dtype=np.int64)
    if quadratic:
        qdiag[nt:] = 1
    A = np.vstack([-system.M_tilde, -system.N_tilde])
    b = np.concatenate([ebit_bound, demand_bound])
    ub = op_bounds(system, ebit_bound, demand_bound)
    return ipsolver.IPInstance(c=c, qdiag=qdiag, A=A, b=b, ub=ub, n_swaps=nt)


# ---------------------------------------------------------------------------
# Policies


def greedy_decide(info: InfoSet, system: TransitionSystem,
                  rng: np.random.Generator) -> np.ndarray:
    """Serve local demand, then swap whatever is available, at random.

    Consumption on each service queue is set to min(available, pending);
    afterwards transitions are drawn uniformly among the currently feasible
    ones (both parents nonempty in the simulated availability, counting
    children created by earlier picks) until none is feasible. Demand plays
    no role in the swap choice.
    """
    avail = np.maximum(info.q - info.l + info.a, 0).astype(np.int64)
    pending = (info.d + info.b).astype(np.int64)
    nt = system.n_transitions
    r = np.zeros(system.n_ops, dtype=np.int64)
    cons = np.minimum(avail, pending)
    r[nt:] = cons
    sim = avail - cons
    parents = [system.swap_rows(c) for c in range(nt)]
    while True:
        feasible = [c for c, (p1, p2, _) in enumerate(parents)
                    if sim[p1] >= 1 and sim[p2] >= 1]
        if not feasible:
            return r
        c = feasible[rng.integers(len(feasible))]
        p1, p2, child = parents[c]
        sim[p1] -= 1
        sim[p2] -= 1
        sim[child] += 1
        r[c] += 1


def maxweight_decide(info: InfoSet, system: TransitionSystem,
                     rng: np.random.Generator,
                     node_budget: int = ipsolver.DEFAULT_NODE_BUDGET,
                     time_budget: float | None = None,
                     memo=None) -> np.ndarray:
    return _optimize(info, system, rng, quadratic=False, node_budget=node_budget,
                     time_budget=time_budget, memo=memo)


def quadratic_decide(info: InfoSet, system: TransitionSystem,
                     rng: np.random.Generator,
                     node_budget: int = ipsolver.DEFAULT_NODE_BUDGET,
                     time_budget: float | None = None,
                     memo=None) -> np.ndarray:
    return _optimize(info, system, rng, quadratic=True, node_budget=node_budget,
                     time_budget=time_budget, memo=memo)


def _optimize(info, system, rng, quadratic, node_budget, time_budget, memo,
              inst=None):
    if inst is None:
        inst = _instance(info, system, quadratic)
    key = None
    if memo is not None:
        key = (quadratic, inst.c.tobytes(), inst.b.tobytes())
        hit = memo.get(key)
        if hit is not None:
            return hit.copy()
    res = ipsolver.solve(inst, node_budget=node_budget, time_budget=time_budget)
    if not res.optimal:
        # budget exhausted: degrade gracefully to a greedy decision
        logger.warning("solver budget exhausted at t=%d (%d nodes); greedy fallback",
                       info.t, res.nodes)
        if info.level == "FI" or info.level == "LI":
            return greedy_decide(info, system, rng)
        zero = np.zeros(system.n_queues, dtype=np.int64)
        proxy = InfoSet("FI", info.q, info.d, info.params, a=zero, l=zero, b=zero)
        return greedy_decide(proxy, system, rng)
    r = res.r.astype(np.int64)
    if memo is not None:
        memo.put(key, r.copy())
    return r


def op_owner(system: TransitionSystem, col: int) -> str:
    """LI execution ownership: a swap belongs to its middle node, a
    consumption to the smaller endpoint of its queue."""
    nt = system.n_transitions
    if col < nt:
        return system.transitions[col][1]
    return system.queues[col - nt][0]


def li_decide(state: SystemState, realization: StepRealization,
              params: StochasticParams, system: TransitionSystem,
              rng: np.random.Generator, quadratic: bool = False,
              node_budget: int = ipsolver.DEFAULT_NODE_BUDGET,
              memo=None) -> np.ndarray:
    """Assemble the network decision from per-node locally informed solutions.

    Every node solves the full problem with its own information blend and
    executes only the operations it owns; the union goes to the conflict
    engine, which arbitrates any resulting overshoot.
    """
    owners = np.array([op_owner(system, col) for col in range(system.n_ops)])
    r = np.zeros(system.n_ops, dtype=np.int64)
    for node in sorted(set(owners)):
        owned = owners == node
        info = make_info("LI", state, realization, params, node=node)
        inst = _instance(info, system, quadratic)
        if not inst.ub[owned].any():
            continue  # nothing this node owns can execute; skip its solve
        local = _optimize(info, system, rng, quadratic=quadratic,
                          node_budget=node_budget, time_budget=None, memo=memo,
                          inst=inst)
        r[owned] = local[owned]
    return r


# ---------------------------------------------------------------------------
# Round robin (dumbbell scenario)


@dataclass
class RoundRobinModes:
    """Precomputed single-commodity decision vectors for the dumbbell."""

    zero: np.ndarray
    modes: tuple[np.ndarray, np.ndarray]
    service_queues: tuple[int, int]  # queue row of each commodity
    dt: float


def route_operations(system: TransitionSystem, route) -> tuple[list[int], int]:
    """Transition columns generated by one route plus its endpoint consumption."""
    cols = []
    n = len(route)
    for a in range(n):
        for m in range(a + 1, n):
            for bpos in range(m + 1, n):
                i, j, k = route[a], route[m], route[bpos]
                if _sorted_pair(i, k) != (i, k):
                    i, k = k, i
                cols.append(system.transition_index[(i, j, k)])
    endpoint = system.queue_index[_sorted_pair(route[0], route[-1])]
    return sorted(set(cols)), endpoint


def build_roundrobin_modes(system: TransitionSystem, route_a, route_b,
                           dt: float, burst: int) -> RoundRobinModes:
    """Precompute the three decision vectors the round-robin cycles through.

    Each mode asks for `burst` units of every operation along one route;
    rank-ordered clipping in the conflict engine turns that into greedy
    service of that single commodity.
    """
    edges_a = {_sorted_pair(u, v) for u, v in zip(route_a, route_a[1:])}
    edges_b = {_sorted_pair(u, v) for u, v in zip(route_b, route_b[1:])}
    if len(edges_a & edges_b) != 1:
        raise ConfigurationError(
            "round robin expects a dumbbell: the two routes must share exactly one link")
    zero = np.zeros(system.n_ops, dtype=np.int64)
    modes = []
    queues = []
    for route in (route_a, route_b):
        cols, endpoint = route_operations(system, route)
        r = zero.copy()
        for c in cols:
            r[c] = burst
        r[system.n_transitions + endpoint] = burst
        modes.append(r)
        queues.append(endpoint)
    return RoundRobinModes(zero=zero, modes=(modes[0], modes[1]),
                           service_queues=(queues[0], queues[1]), dt=dt)


def roundrobin_decide(t: int, config: PolicyConfig, demand_flags,
                      modes: RoundRobinModes) -> np.ndarray:
    """Alternate full allocation of the bottleneck between the two commodities."""
    has_a, has_b = demand_flags
    if not has_a and not has_b:
        return modes.zero.copy()
    if has_a and not has_b:
        return modes.modes[0].copy()
    if has_b and not has_a:
        return modes.modes[1].copy()
    if config.roundrobin_period <= 0:
        raise ConfigurationError("round robin needs a positive period")
    idx = int(math.floor(t * modes.dt / config.roundrobin_period)) % 2
    return modes.modes[idx].copy()
