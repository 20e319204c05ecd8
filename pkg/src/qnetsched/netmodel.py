"""Network model: topologies, service pairs, routes and the transition system.

Builds the extended edge set (ebit queues), the swap transition set, the
signed incidence matrices that drive queue evolution, and the execution
rank map used for conflict management. Everything here is built once per
scenario and immutable afterwards, so it can be shared freely across
parallel simulation workers.
"""

from __future__ import annotations

import heapq
import itertools
import string
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

MAX_RETRIES = 1000
DEFAULT_PENALTY = 10.0


class GenerationError(RuntimeError):
    """Random topology could not be made connected within the retry budget."""


class SelectionError(RuntimeError):
    """Main-pair selection failed (residual graph kept disconnecting)."""


class PlacementError(RuntimeError):
    """Not enough free nodes to place the requested parasitic pairs."""


class RankCycleError(RuntimeError):
    """Rank assignment found no fixed point (cyclic operation dependency)."""


def _node_key(n: str):
    # Shorter labels sort first so "2" < "10"; ties break lexicographically.
    return (len(n), n)


def node_letters(n: int) -> list[str]:
    if n <= 26:
        return list(string.ascii_uppercase[:n])
    return [f"N{i}" for i in range(n)]


def queue_label(pair: tuple[str, str]) -> str:
    u, v = pair
    if len(u) == 1 and len(v) == 1:
        return u + v
    return f"{u}-{v}"


def transition_label(tr: tuple[str, str, str]) -> str:
    i, j, k = tr
    if max(len(i), len(j), len(k)) == 1:
        return f"{i}[{j}]{k}"
    return f"{i}[{j}]{k}"


def _sorted_pair(u: str, v: str) -> tuple[str, str]:
    return (u, v) if _node_key(u) <= _node_key(v) else (v, u)


# ---------------------------------------------------------------------------
# Topologies


@dataclass(frozen=True)
class TopologyParams:
    """Parameters for one of the predefined topology families."""

    kind: str  # chain | grid | perforated_grid | erdos_renyi | watts_strogatz | dumbbell | custom
    n: int | None = None
    rows: int | None = None
    cols: int | None = None
    removal_prob: float | None = None
    p: float | None = None
    k: int | None = None
    path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind in ("erdos_renyi",) and not (0.0 <= float(self.p) <= 1.0):
            raise ValueError("p must lie in [0, 1]")
        if self.kind == "watts_strogatz":
            if not (0.0 <= float(self.p) <= 1.0):
                raise ValueError("p must lie in [0, 1]")
            if int(self.k) % 2 != 0:
                raise ValueError("k must be even for watts_strogatz")
        if self.kind == "perforated_grid" and not (0.0 <= float(self.removal_prob) <= 1.0):
            raise ValueError("removal_prob must lie in [0, 1]")


def _as_string_graph(g: nx.Graph) -> nx.Graph:
    mapping = {n: str(n) for n in g.nodes}
    return nx.relabel_nodes(g, mapping)


def generate_topology(params: TopologyParams) -> nx.Graph:
    """Build a connected graph for the requested topology family.

    Random families are resampled until connected, up to MAX_RETRIES, after
    which a GenerationError is raised. Node labels are strings; chains and
    the dumbbell use letters to match the usual small-network notation.
    """
    kind = params.kind
    if kind == "chain":
        names = node_letters(int(params.n))
        g = nx.Graph()
        g.add_nodes_from(names)
        g.add_edges_from(zip(names, names[1:]))
        return g
    if kind == "dumbbell":
        g = nx.Graph()
        g.add_nodes_from("ABCDEF")
        g.add_edges_from([("A", "B"), ("C", "B"), ("B", "D"), ("D", "E"), ("D", "F")])
        return g
    if kind == "grid":
        return _as_string_graph(_grid_graph(int(params.rows), int(params.cols)))
    if kind == "perforated_grid":
        rng = np.random.default_rng(params.seed)
        base = _grid_graph(int(params.rows), int(params.cols))
        prob = float(params.removal_prob)
        for _ in range(MAX_RETRIES):
            keep = [n for n in base.nodes if rng.random() >= prob]
            g = base.subgraph(keep).copy()
            if g.number_of_nodes() >= 2 and nx.is_connected(g):
                return _as_string_graph(g)
        raise GenerationError("perforated grid stayed disconnected after retries")
    if kind == "erdos_renyi":
        rng = np.random.default_rng(params.seed)
        for _ in range(MAX_RETRIES):
            sub = int(rng.integers(0, 2**31 - 1))
            g = nx.gnp_random_graph(int(params.n), float(params.p), seed=sub)
            if g.number_of_nodes() >= 2 and nx.is_connected(g):
                return _as_string_graph(g)
        raise GenerationError("Erdos-Renyi graph stayed disconnected after retries")
    if kind == "watts_strogatz":
        rng = np.random.default_rng(params.seed)
        for _ in range(MAX_RETRIES):
            sub = int(rng.integers(0, 2**31 - 1))
            g = nx.watts_strogatz_graph(int(params.n), int(params.k), float(params.p), seed=sub)
            if nx.is_connected(g):
                return _as_string_graph(g)
        raise GenerationError("Watts-Strogatz graph stayed disconnected after retries")
    if kind == "custom":
        return read_edge_list(params.path)
    raise ValueError(f"unknown topology kind {kind!r}")


def _grid_graph(rows: int, cols: int) -> nx.Graph:
    g = nx.Graph()
    idx = lambda r, c: r * cols + c
    for r in range(rows):
        for c in range(cols):
            g.add_node(idx(r, c))
            if c + 1 < cols:
                g.add_edge(idx(r, c), idx(r, c + 1))
            if r + 1 < rows:
                g.add_edge(idx(r, c), idx(r + 1, c))
    return g


def read_edge_list(path: str) -> nx.Graph:
    """Parse a custom graph given as one `u v` pair per line."""
    g = nx.Graph()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            g.add_edge(parts[0], parts[1])
    return g


# ---------------------------------------------------------------------------
# Shortest paths with a deterministic tie-break


def _lex_shortest_path(graph: nx.Graph, src: str, dst: str,
                       weight: dict | None = None) -> list[str] | None:
    """Dijkstra returning the lexicographically smallest minimum-weight path.

    Paths are compared as tuples of node keys, which pins a unique route in
    case of weight ties and makes every downstream artifact reproducible.
    """
    order = sorted(graph.nodes, key=_node_key)
    nidx = {n: i for i, n in enumerate(order)}
    heap = [(0.0, (nidx[src],), src)]
    done = set()
    while heap:
        dist, path_idx, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == dst:
            return [order[i] for i in path_idx]
        for nb in graph.neighbors(node):
            if nb in done:
                continue
            w = 1.0 if weight is None else weight[_sorted_pair(node, nb)]
            heapq.heappush(heap, (dist + w, path_idx + (nidx[nb],), nb))
    return None


def _diameter_pair(graph: nx.Graph) -> tuple[str, str]:
    best = None
    for src, dists in nx.all_pairs_shortest_path_length(graph):
        for dst, d in dists.items():
            if _node_key(src) >= _node_key(dst):
                continue
            cand = (-d, _node_key(src), _node_key(dst), src, dst)
            if best is None or cand < best:
                best = cand
    return best[3], best[4]


# ---------------------------------------------------------------------------
# Service pairs


def select_main_pairs(graph: nx.Graph, edge_removal_prob: float,
                      seed: int) -> list[tuple[str, str]]:
    """Pick the two main service pairs.

    Pair 1 spans a longest shortest path; pair 2 spans the longest shortest
    path that survives after each edge of that path is independently removed
    with the given probability (resampling removals that disconnect the
    graph, up to a bounded retry count).
    """
    if not nx.is_connected(graph):
        raise SelectionError("graph must be connected")
    a1, b1 = _diameter_pair(graph)
    lam = _lex_shortest_path(graph, a1, b1)
    lam_edges = [_sorted_pair(u, v) for u, v in zip(lam, lam[1:])]
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        removed = [e for e in lam_edges if rng.random() < edge_removal_prob]
        residual = graph.copy()
        residual.remove_edges_from(removed)
        # Nodes fully stranded by the removal no longer carry any route and
        # are dropped before the connectivity check; otherwise pruning a
        # path's interior (e.g. the whole path on a cycle) could never pass.
        residual.remove_nodes_from([n for n in residual.nodes if residual.degree(n) == 0])
        if residual.number_of_nodes() >= 2 and nx.is_connected(residual):
            a2, b2 = _diameter_pair(residual)
            return [(a1, b1), (a2, b2)]
    raise SelectionError("edge removal kept disconnecting the graph")


def place_parasitic_pairs(graph: nx.Graph, n_pairs: int, forbidden_nodes,
                          seed: int) -> list[tuple[str, str]]:
    """Sample 2*n_pairs distinct free nodes uniformly and pair them in draw order."""
    candidates = sorted(set(graph.nodes) - set(forbidden_nodes), key=_node_key)
    if len(candidates) < 2 * n_pairs:
        raise PlacementError(
            f"need {2 * n_pairs} free nodes, only {len(candidates)} available")
    if n_pairs == 0:
        return []
    rng = np.random.default_rng(seed)
    drawn = rng.choice(len(candidates), size=2 * n_pairs, replace=False)
    users = [candidates[i] for i in drawn]
    return [(users[2 * i], users[2 * i + 1]) for i in range(n_pairs)]


def compute_routes(graph: nx.Graph, pair: tuple[str, str], m: int,
                   penalty_factor: float = DEFAULT_PENALTY) -> list[tuple[str, ...]]:
    """Compute up to m routes for a service pair by penalized shortest paths.

    The first route is the plain hop-count shortest path; each following one
    re-runs the search after multiplying the weights of edges used so far by
    penalty_factor, encouraging (but not forcing) disjointness. Stops early
    once the search starts repeating routes.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    weight = {_sorted_pair(u, v): 1.0 for u, v in graph.edges}
    routes: list[tuple[str, ...]] = []
    for _ in range(m):
        path = _lex_shortest_path(graph, pair[0], pair[1], weight)
        if path is None:
            break
        route = tuple(path)
        if route in routes:
            break
        routes.append(route)
        for u, v in zip(path, path[1:]):
            weight[_sorted_pair(u, v)] *= penalty_factor
    return routes


@dataclass(frozen=True)
class ServicePair:
    """A user pair requesting end-to-end ebits, tagged main or parasitic."""

    alice: str
    bob: str
    kind: str = "main"  # main | parasitic

    @property
    def queue(self) -> tuple[str, str]:
        return _sorted_pair(self.alice, self.bob)


@dataclass(frozen=True)
class NetworkSpec:
    """A fully specified scenario: graph, user pairs and their fixed routes."""

    nodes: tuple[str, ...]
    fiber_edges: tuple[tuple[str, str], ...]
    service_pairs: tuple[ServicePair, ...]
    routes: tuple[tuple[tuple[str, ...], ...], ...]  # per service pair

    def __post_init__(self):
        edges = set(self.fiber_edges)
        g = nx.Graph(self.fiber_edges)
        g.add_nodes_from(self.nodes)
        if len(g) and not nx.is_connected(g):
            raise ValueError("fiber graph must be connected")
        for sp, routes in zip(self.service_pairs, self.routes):
            for route in routes:
                if len(set(route)) != len(route):
                    raise ValueError(f"route {route} is not a simple path")
                if {route[0], route[-1]} != {sp.alice, sp.bob}:
                    raise ValueError(f"route {route} does not span {sp.alice}-{sp.bob}")
                for u, v in zip(route, route[1:]):
                    if _sorted_pair(u, v) not in edges:
                        raise ValueError(f"route {route} uses non-fiber hop {u}-{v}")

    def all_routes(self) -> list[tuple[str, ...]]:
        return [r for group in self.routes for r in group]


def build_network(graph: nx.Graph, main_pairs, parasitic_pairs, m: int,
                  penalty_factor: float = DEFAULT_PENALTY) -> NetworkSpec:
    """Assemble a NetworkSpec from a graph and explicit service pairs."""
    pairs = [ServicePair(a, b, "main") for a, b in main_pairs]
    pairs += [ServicePair(a, b, "parasitic") for a, b in parasitic_pairs]
    routes = tuple(tuple(compute_routes(graph, (p.alice, p.bob), m, penalty_factor))
                   for p in pairs)
    nodes = tuple(sorted(graph.nodes, key=_node_key))
    edges = tuple(sorted((_sorted_pair(u, v) for u, v in graph.edges),
                         key=lambda e: (_node_key(e[0]), _node_key(e[1]))))
    return NetworkSpec(nodes, edges, tuple(pairs), routes)


# ---------------------------------------------------------------------------
# Transition system


@dataclass
class TransitionSystem:
    """Queues, swap transitions, incidence matrices and operation ranks.

    Columns of M_tilde are ordered as [transitions | consumptions]; every
    transition column carries -1 on its two parent queues and +1 on the
    child, the consumption block is minus the identity, and N_tilde is the
    zero block followed by minus the identity. ranks[col] gives the
    execution rank of each operation column.
    """

    queues: list[tuple[str, str]]
    physical: np.ndarray  # bool per queue
    transitions: list[tuple[str, str, str]]
    M_tilde: np.ndarray
    N_tilde: np.ndarray
    ranks: np.ndarray  # int per operation column
    queue_index: dict = field(repr=False, default_factory=dict)
    transition_index: dict = field(repr=False, default_factory=dict)

    @property
    def n_queues(self) -> int:
        return len(self.queues)

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    @property
    def n_ops(self) -> int:
        return self.n_transitions + self.n_queues

    def queue_labels(self) -> list[str]:
        return [queue_label(q) for q in self.queues]

    def op_labels(self) -> list[str]:
        return [transition_label(t) for t in self.transitions] + self.queue_labels()

    def swap_rows(self, t_col: int) -> tuple[int, int, int]:
        """Row indices (parent1, parent2, child) of transition column t_col."""
        i, j, k = self.transitions[t_col]
        return (self.queue_index[_sorted_pair(i, j)],
                self.queue_index[_sorted_pair(j, k)],
                self.queue_index[_sorted_pair(i, k)])


def build_transition_system(routes, physical_edges) -> TransitionSystem:
    """Generate queues, transitions and matrices from the service routes.

    The queue set is the union over routes of all contiguous sub-segment
    endpoint pairs, and the transition set the union of all position-ordered
    triples; pairs of nodes not covered by any route are never created.
    """
    qset: set[tuple[str, str]] = set()
    tset: set[tuple[str, str, str]] = set()
    for route in routes:
        n = len(route)
        for a in range(n):
            for b in range(a + 1, n):
                qset.add(_sorted_pair(route[a], route[b]))
        for a, mpos, b in itertools.combinations(range(n), 3):
            i, j, k = route[a], route[mpos], route[b]
            if _node_key(i) > _node_key(k):
                i, k = k, i
            tset.add((i, j, k))
    queues = sorted(qset, key=lambda q: (_node_key(q[0]), _node_key(q[1])))
    transitions = sorted(tset, key=lambda t: tuple(_node_key(x) for x in t))
    qi = {q: r for r, q in enumerate(queues)}
    ti = {t: c for c, t in enumerate(transitions)}

    nq, nt = len(queues), len(transitions)
    M = np.zeros((nq, nt + nq), dtype=np.int64)
    for c, (i, j, k) in enumerate(transitions):
        M[qi[_sorted_pair(i, j)], c] -= 1
        M[qi[_sorted_pair(j, k)], c] -= 1
        M[qi[_sorted_pair(i, k)], c] += 1
    M[:, nt:] = -np.eye(nq, dtype=np.int64)
    N = np.zeros_like(M)
    N[:, nt:] = -np.eye(nq, dtype=np.int64)

    phys_set = {_sorted_pair(u, v) for u, v in physical_edges}
    physical = np.array([q in phys_set for q in queues], dtype=bool)

    ts = TransitionSystem(queues, physical, transitions, M, N,
                          ranks=np.full(nt + nq, -1, dtype=np.int64),
                          queue_index=qi, transition_index=ti)
    ts.ranks = assign_ranks(ts)
    return ts


def assign_ranks(ts: TransitionSystem, physical_edges=None) -> np.ndarray:
    """Assign execution ranks: consumptions even, swap transitions odd.

    Consumption from a physical queue is pinned to rank 0 (even when a
    transition feeds it, as in triangle topologies). A transition outranks
    its parents' consumptions by one; a virtual queue's consumption outranks
    every transition feeding it by one. Computed by iterative relaxation;
    raises if no fixed point is reached within n_transitions + 1 sweeps.
    """
    physical = ts.physical
    if physical_edges is not None:
        phys_set = {_sorted_pair(u, v) for u, v in physical_edges}
        physical = np.array([q in phys_set for q in ts.queues], dtype=bool)
    nt, nq = ts.n_transitions, ts.n_queues
    cons_rank = [0 if physical[e] else None for e in range(nq)]
    trans_rank: list[int | None] = [None] * nt
    feeders: list[list[int]] = [[] for _ in range(nq)]
    parents: list[tuple[int, int]] = []
    for c in range(nt):
        p1, p2, child = ts.swap_rows(c)
        parents.append((p1, p2))
        feeders[child].append(c)

    for _ in range(nt + 1):
        changed = False
        for c in range(nt):
            if trans_rank[c] is not None:
                continue
            p1, p2 = parents[c]
            if cons_rank[p1] is not None and cons_rank[p2] is not None:
                trans_rank[c] = 1 + max(cons_rank[p1], cons_rank[p2])
                changed = True
        for e in range(nq):
            if cons_rank[e] is not None:
                continue
            if all(trans_rank[c] is not None for c in feeders[e]):
                cons_rank[e] = 1 + max((trans_rank[c] for c in feeders[e]), default=-1)
                changed = True
        if all(r is not None for r in trans_rank) and all(r is not None for r in cons_rank):
            return np.array(trans_rank + cons_rank, dtype=np.int64)
        if not changed:
            break
    raise RankCycleError("rank assignment found no fixed point (cyclic dependency)")


# ---------------------------------------------------------------------------
# Emission


def matrix_csv(ts: TransitionSystem, which: str = "M") -> str:
    """Render M_tilde (or N_tilde) as CSV for diffing against reference tables."""
    mat = ts.M_tilde if which == "M" else ts.N_tilde
    lines = ["queue," + ",".join(ts.op_labels())]
    for r, q in enumerate(ts.queues):
        lines.append(queue_label(q) + "," + ",".join(str(int(v)) for v in mat[r]))
    return "\n".join(lines) + "\n"


def write_matrix_csv(ts: TransitionSystem, path: str, which: str = "M") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(matrix_csv(ts, which))


def write_edge_list(graph: nx.Graph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in sorted((_sorted_pair(a, b) for a, b in graph.edges),
                           key=lambda e: (_node_key(e[0]), _node_key(e[1]))):
            fh.write(f"{u} {v}\n")
