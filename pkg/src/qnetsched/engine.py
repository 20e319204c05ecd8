"""Simulation engine: conflict-managed decision application, the per-step
loop, and stability-region sweeps with memoization, Pareto skipping and a
parallel worker pool.

Per-cell seeds derive from (master seed, axis indices, parasitic-set index)
alone, so randomized evaluation order, dominance skipping and the worker
count can never change a simulated cell's result.
"""

from __future__ import annotations

import collections
import csv
import logging
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field, asdict

import networkx as nx
import numpy as np

from . import policies as pol
from . import stochproc as sp
from .netmodel import (TransitionSystem, build_network, build_transition_system,
                       place_parasitic_pairs)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.10
DEFAULT_MEMO_SIZE = 100_000
TRACE_POINTS = 2000


class MemoCache:
    """Bounded least-recently-used cache for solver decisions."""

    def __init__(self, maxsize: int = DEFAULT_MEMO_SIZE):
        self.maxsize = maxsize
        self._data: collections.OrderedDict = collections.OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        try:
            val = self._data[key]
        except KeyError:
            self.misses += 1
            return None
        self._data.move_to_end(key)
        self.hits += 1
        return val

    def put(self, key, value):
        self._data[key] = value
        self._data.move_to_end(key)
        if len(self._data) > self.maxsize:
            self._data.popitem(last=False)


def apply_decision(ebit_avail: np.ndarray, demand_avail: np.ndarray,
                   r: np.ndarray, system: TransitionSystem,
                   rng: np.random.Generator):
    """Execute a requested decision unit by unit under the rank discipline.

    Ranks run in ascending order; within a rank the units are shuffled so
    conflicting requests are arbitrated uniformly at random. A swap unit
    executes only if both parents still hold a pair; a consumption unit
    only if its queue holds both a pair and a pending demand. Everything
    else is dropped (and counted), which is the clipping contract.

    Returns (applied decision, served consumptions per queue, failed units).
    Mutates ebit_avail / demand_avail in place to the post-decision values.
    """
    nt = system.n_transitions
    applied = np.zeros_like(r)
    served = np.zeros(system.n_queues, dtype=np.int64)
    failed = 0
    cols = np.repeat(np.arange(system.n_ops), r)
    if cols.size == 0:
        return applied, served, failed
    order = np.argsort(system.ranks[cols], kind="stable")
    cols = cols[order]
    ranks_sorted = system.ranks[cols]
    start = 0
    while start < cols.size:
        stop = start
        while stop < cols.size and ranks_sorted[stop] == ranks_sorted[start]:
            stop += 1
        group = cols[start:stop].copy()
        rng.shuffle(group)
        for col in group:
            if col < nt:
                p1, p2, child = system.swap_rows(int(col))
                if ebit_avail[p1] >= 1 and ebit_avail[p2] >= 1:
                    ebit_avail[p1] -= 1
                    ebit_avail[p2] -= 1
                    ebit_avail[child] += 1
                    applied[col] += 1
                else:
                    failed += 1
            else:
                e = int(col) - nt
                if ebit_avail[e] >= 1 and demand_avail[e] >= 1:
                    ebit_avail[e] -= 1
                    demand_avail[e] -= 1
                    served[e] += 1
                    applied[col] += 1
                else:
                    failed += 1
        start = stop
    return applied, served, failed


@dataclass
class RunMetrics:
    total_demand_arrived: int
    total_served: int
    unserved_fraction: float
    avg_backlog: float
    max_excursion: int
    demand_trace: list = field(default_factory=list)  # (step, total demand)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunMetrics":
        d = dict(d)
        d["demand_trace"] = [tuple(p) for p in d.get("demand_trace", [])]
        return cls(**d)


class PolicyDriver:
    """Uniform per-step decision interface over the policy families."""

    def __init__(self, config: pol.PolicyConfig, system: TransitionSystem,
                 rr_modes: pol.RoundRobinModes | None = None,
                 node_budget: int = 10**6):
        self.config = config
        self.system = system
        self.rr_modes = rr_modes
        self.node_budget = node_budget
        if config.family == "roundrobin" and rr_modes is None:
            raise pol.ConfigurationError("round robin needs precomputed dumbbell modes")

    def decide(self, state: sp.SystemState, real: sp.StepRealization,
               params: sp.StochasticParams, rng: np.random.Generator,
               memo: MemoCache | None = None) -> np.ndarray:
        fam = self.config.family
        if fam == "greedy":
            info = pol.make_info("FI", state, real, params)
            return pol.greedy_decide(info, self.system, rng)
        if fam == "roundrobin":
            pending = state.d + real.b
            qa, qb = self.rr_modes.service_queues
            flags = (pending[qa] > 0, pending[qb] > 0)
            return pol.roundrobin_decide(state.t, self.config, flags, self.rr_modes)
        quadratic = fam == "quadratic"
        if fam not in ("maxweight", "quadratic"):
            raise pol.ConfigurationError(f"unknown policy family {fam!r}")
        if self.config.info == "LI":
            return pol.li_decide(state, real, params, self.system, rng,
                                 quadratic=quadratic, node_budget=self.node_budget,
                                 memo=memo)
        info = pol.make_info(self.config.info, state, real, params)
        fn = pol.quadratic_decide if quadratic else pol.maxweight_decide
        return fn(info, self.system, rng, node_budget=self.node_budget, memo=memo)

    def label(self) -> str:
        if self.config.family in ("greedy", "roundrobin"):
            return self.config.family
        return f"{self.config.family}-{self.config.info}"


def run_simulation(system: TransitionSystem, params: sp.StochasticParams,
                   policy: PolicyDriver, steps: int, transient_discard: int,
                   seed, memo: MemoCache | None = None,
                   collect_trace: bool = True) -> RunMetrics:
    """Run the discrete-time loop and report demand statistics.

    The per-step order is: snapshot, draw losses on the snapshot, draw
    arrivals and demands, decide, clip-and-apply by ranks, advance. Metrics
    are accumulated over the steps after the transient discard window;
    the demand trace is subsampled over the whole run.
    """
    if steps <= transient_discard:
        raise ValueError("steps must exceed the transient discard window")
    rng = np.random.default_rng(seed)
    nq = system.n_queues
    state = sp.SystemState(np.zeros(nq, dtype=np.int64), np.zeros(nq, dtype=np.int64))
    stride = max(1, steps // TRACE_POINTS)
    arrived_w = served_w = 0
    arrived_full = served_full = 0
    backlog_sum = 0
    max_exc = 0
    trace = []
    for t in range(steps):
        real = sp.draw_step(state, params, rng)
        r = policy.decide(state, real, params, rng, memo)
        avail = state.q - real.l + real.a
        if (avail < 0).any():
            raise sp.InvariantViolation("losses exceeded stored ebits")
        demand = state.d + real.b
        applied, served, _ = apply_decision(avail, demand, r, system, rng)
        state = sp.advance(state, real, applied, system)
        if not np.array_equal(state.q, avail):
            raise sp.InvariantViolation("advance disagrees with the applied decision")
        b_tot = int(real.b.sum())
        s_tot = int(served.sum())
        arrived_full += b_tot
        served_full += s_tot
        backlog = int(state.d.sum())
        if t >= transient_discard:
            arrived_w += b_tot
            served_w += s_tot
            backlog_sum += backlog
            max_exc = max(max_exc, backlog)
        if collect_trace and t % stride == 0:
            trace.append((t, backlog))
    final_backlog = int(state.d.sum())
    if arrived_full - served_full != final_backlog:
        raise sp.InvariantViolation("demand conservation audit failed")
    window = steps - transient_discard
    unserved = 0.0
    if arrived_w > 0:
        unserved = min(max(1.0 - served_w / arrived_w, 0.0), 1.0)
    return RunMetrics(total_demand_arrived=arrived_w, total_served=served_w,
                      unserved_fraction=unserved,
                      avg_backlog=backlog_sum / window,
                      max_excursion=max_exc, demand_trace=trace)


def classify_stability(metrics: RunMetrics, threshold: float = DEFAULT_THRESHOLD) -> str:
    """Unstable iff the unserved fraction strictly exceeds the threshold."""
    return "unstable" if metrics.unserved_fraction > threshold else "stable"


# ---------------------------------------------------------------------------
# Stability sweeps


@dataclass
class SweepScenario:
    """Everything needed to evaluate one load point of a stability grid."""

    fiber_edges: list
    main_pairs: list  # two (alice, bob) tuples
    n_parasitic_pairs: int
    parasitic_load_hz: float
    routes_per_pair: int
    penalty_factor: float
    alpha_hz: float
    eta: float
    dt: float
    steps: int
    transient_discard: int
    cap: int | None = None
    bsm_factor: float = 1.0
    threshold: float = DEFAULT_THRESHOLD
    memo_size: int = DEFAULT_MEMO_SIZE
    use_memo: bool = True


@dataclass
class CellResult:
    status: str  # simulated | skipped-dominated | failed
    unserved_fraction: float = float("nan")
    avg_backlog: float = float("nan")
    max_excursion: float = float("nan")

    @property
    def unstable(self) -> bool:
        return self.status == "simulated" and self.unserved_fraction > DEFAULT_THRESHOLD


@dataclass
class StabilityGrid:
    axis1: list
    axis2: list
    parasitic_load_hz: float
    policy: str
    master_seed: int
    threshold: float
    cells: dict = field(default_factory=dict)  # (i, j) -> CellResult

    def unstable_cells(self):
        return [(i, j) for (i, j), c in self.cells.items()
                if c.status == "simulated" and c.unserved_fraction > self.threshold]

    def stable_area(self) -> int:
        return sum(1 for c in self.cells.values()
                   if c.status == "simulated" and c.unserved_fraction <= self.threshold)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["axis1_hz", "axis2_hz", "parasitic_load_hz", "policy",
                        "status", "unserved_fraction", "avg_backlog", "max_excursion"])
            for (i, j), cell in sorted(self.cells.items()):
                w.writerow([repr(self.axis1[i]), repr(self.axis2[j]),
                            repr(self.parasitic_load_hz), self.policy, cell.status,
                            repr(cell.unserved_fraction), repr(cell.avg_backlog),
                            repr(cell.max_excursion)])

    @staticmethod
    def read_csv(path: str) -> dict:
        """Load previously computed cells keyed by (axis1_hz, axis2_hz)."""
        out = {}
        with open(path, "r", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (float(row["axis1_hz"]), float(row["axis2_hz"]))
                out[key] = CellResult(row["status"], float(row["unserved_fraction"]),
                                      float(row["avg_backlog"]), float(row["max_excursion"]))
        return out


def _dominated(cell_loads, unstable_loads) -> bool:
    x1, x2 = cell_loads
    for u1, u2 in unstable_loads:
        if x1 >= u1 and x2 >= u2 and (x1 > u1 or x2 > u2):
            return True
    return False


def _cell_seed(master_seed: int, i: int, j: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(i), int(j), int(k)])


def simulate_cell(scenario: SweepScenario, config: pol.PolicyConfig,
                  loads: tuple[float, float], ij: tuple[int, int],
                  n_parasitic_sets: int, master_seed: int) -> CellResult:
    """Simulate one load point, averaging over fresh parasitic placements."""
    graph = nx.Graph(scenario.fiber_edges)
    i, j = ij
    unserved, backlog, excursion = [], [], []
    forbidden = [n for pair in scenario.main_pairs for n in pair]
    for k in range(max(1, n_parasitic_sets)):
        ss = _cell_seed(master_seed, i, j, k)
        place_seed, run_seed = ss.spawn(2)
        parasitic = []
        if scenario.n_parasitic_pairs > 0:
            parasitic = place_parasitic_pairs(graph, scenario.n_parasitic_pairs,
                                              forbidden, place_seed)
        spec = build_network(graph, scenario.main_pairs, parasitic,
                             scenario.routes_per_pair, scenario.penalty_factor)
        system = build_transition_system(spec.all_routes(), spec.fiber_edges)
        beta = {}
        for pair, load in zip(scenario.main_pairs, loads):
            beta[tuple(sorted(pair))] = beta.get(tuple(sorted(pair)), 0.0) + load
        for pair in parasitic:
            key = tuple(sorted(pair))
            beta[key] = beta.get(key, 0.0) + scenario.parasitic_load_hz
        params = sp.make_params(system, alpha_hz=scenario.alpha_hz, beta_hz=beta,
                                dt=scenario.dt, eta=scenario.eta, cap=scenario.cap,
                                bsm_factor=scenario.bsm_factor)
        driver = PolicyDriver(config, system)
        memo = MemoCache(scenario.memo_size) if scenario.use_memo else None
        metrics = run_simulation(system, params, driver, scenario.steps,
                                 scenario.transient_discard, run_seed, memo=memo,
                                 collect_trace=False)
        unserved.append(metrics.unserved_fraction)
        backlog.append(metrics.avg_backlog)
        excursion.append(metrics.max_excursion)
    return CellResult("simulated", float(np.mean(unserved)),
                      float(np.mean(backlog)), float(np.mean(excursion)))


def sweep_grid(scenario: SweepScenario, axis1, axis2, configs,
               n_parasitic_sets: int, workers: int, master_seed: int,
               completed: dict | None = None) -> dict:
    """Evaluate the load grid for each policy with dominance-based skipping.

    Cells are visited in a seeded random order; before dispatch, any cell
    componentwise >= an already-unstable cell (strictly greater somewhere)
    is marked skipped-dominated. Failed cells are retried once. Returns a
    mapping from policy label to its StabilityGrid.
    """
    grids = {}
    for cfg_index, config in enumerate(configs):
        label = config.family if config.family in ("greedy", "roundrobin") \
            else f"{config.family}-{config.info}"
        grid = StabilityGrid(list(axis1), list(axis2), scenario.parasitic_load_hz,
                             label, master_seed, scenario.threshold)
        order_rng = np.random.default_rng(
            np.random.SeedSequence([int(master_seed), 7919, cfg_index]))
        cells = [(i, j) for i in range(len(axis1)) for j in range(len(axis2))]
        order = [cells[q] for q in order_rng.permutation(len(cells))]
        unstable_loads: list[tuple[float, float]] = []
        pending = collections.deque()
        for (i, j) in order:
            key = (float(axis1[i]), float(axis2[j]))
            if completed is not None and key in completed:
                cell = completed[key]
                grid.cells[(i, j)] = cell
                if cell.status == "simulated" and cell.unserved_fraction > scenario.threshold:
                    unstable_loads.append(key)
            else:
                pending.append((i, j))

        def job(ij):
            loads = (float(axis1[ij[0]]), float(axis2[ij[1]]))
            return (scenario, config, loads, ij, n_parasitic_sets, master_seed)

        def record(ij, cell):
            grid.cells[ij] = cell
            if cell.status == "simulated" and cell.unserved_fraction > scenario.threshold:
                unstable_loads.append((float(axis1[ij[0]]), float(axis2[ij[1]])))

        if workers <= 1:
            while pending:
                ij = pending.popleft()
                loads = (float(axis1[ij[0]]), float(axis2[ij[1]]))
                if _dominated(loads, unstable_loads):
                    grid.cells[ij] = CellResult("skipped-dominated")
                    continue
                record(ij, _run_one(job(ij)))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                in_flight = {}
                retried = set()
                while pending or in_flight:
                    while pending and len(in_flight) < workers:
                        ij = pending.popleft()
                        loads = (float(axis1[ij[0]]), float(axis2[ij[1]]))
                        if _dominated(loads, unstable_loads):
                            grid.cells[ij] = CellResult("skipped-dominated")
                            continue
                        in_flight[pool.submit(_pool_entry, job(ij))] = ij
                    if not in_flight:
                        continue
                    done, _ = wait(list(in_flight), return_when=FIRST_COMPLETED)
                    for fut in done:
                        ij = in_flight.pop(fut)
                        try:
                            record(ij, fut.result())
                        except Exception:
                            if ij not in retried:
                                retried.add(ij)
                                logger.warning("cell %s failed; retrying once", ij)
                                in_flight[pool.submit(_pool_entry, job(ij))] = ij
                            else:
                                logger.error("cell %s failed twice", ij)
                                grid.cells[ij] = CellResult("failed")
        grids[label] = grid
    return grids


def _run_one(args) -> CellResult:
    scenario, config, loads, ij, n_sets, master_seed = args
    try:
        return simulate_cell(scenario, config, loads, ij, n_sets, master_seed)
    except Exception:
        logger.exception("cell %s failed; retrying once", ij)
        return simulate_cell(scenario, config, loads, ij, n_sets, master_seed)


def _pool_entry(args) -> CellResult:
    scenario, config, loads, ij, n_sets, master_seed = args
    return simulate_cell(scenario, config, loads, ij, n_sets, master_seed)
