import numpy as np
import pytest

from qnetsched import ipsolver as ips

from conftest import enumerate_optimum


def random_instance(rng, dmax=12, ubmax=5, max_rows=14, max_space=20000):
    d = int(rng.integers(1, dmax + 1))
    ub = rng.integers(0, ubmax + 1, size=d)
    while np.prod(ub + 1.0) > max_space:
        j = int(rng.integers(0, d))
        ub[j] = max(0, ub[j] - 1)
    n_rows = int(rng.integers(1, max_rows + 1))
    A = rng.integers(-1, 2, size=(n_rows, d))
    b = rng.integers(0, 8, size=n_rows).astype(float)
    if rng.random() < 0.3:
        b += rng.random(n_rows)  # fractional rhs
    c = np.round(rng.uniform(-5, 2, size=d), 3)
    quad = (rng.random(d) < 0.5).astype(int)
    n_swaps = int(rng.integers(0, d + 1))
    return ips.IPInstance(c, quad, A, b, ub, n_swaps)


class TestExamples:
    def test_single_variable_linear(self):
        inst = ips.IPInstance(c=[-3.0], qdiag=[0], A=[[1]], b=[2.0], ub=[10])
        res = ips.solve(inst)
        assert res.r.tolist() == [2]
        assert res.objective == -6.0
        assert res.optimal

    def test_tie_break_prefers_consumption(self):
        # min -r1 - r2 + 1/2 (r1^2 + r2^2) with r1 + r2 <= 1; both unit points
        # score -1/2, the minimal-swaps rule keeps the consumption one
        inst = ips.IPInstance(c=[-1.0, -1.0], qdiag=[1, 1], A=[[1, 1]], b=[1.0],
                              ub=[3, 3], n_swaps=1)
        res = ips.solve(inst)
        assert res.r.tolist() == [0, 1]
        assert res.objective == -0.5

    def test_zero_vector_when_nothing_attractive(self):
        inst = ips.IPInstance(c=[1.0, 0.0], qdiag=[0, 0], A=[[1, 0]], b=[5.0], ub=[5, 5])
        res = ips.solve(inst)
        assert res.r.tolist() == [0, 0]
        assert res.objective == 0.0

    def test_negative_rhs_clamped(self):
        inst = ips.IPInstance(c=[-1.0], qdiag=[0], A=[[1]], b=[-2.5], ub=[4])
        res = ips.solve(inst)
        assert res.r.tolist() == [0]

    def test_quadratic_interior_optimum(self):
        # min -3r + 1/2 r^2: unconstrained optimum r=3
        inst = ips.IPInstance(c=[-3.0], qdiag=[1], A=[[1]], b=[5.0], ub=[9])
        res = ips.solve(inst)
        assert res.r.tolist() == [3]
        assert res.objective == -4.5

    def test_quadratic_clipped_by_bound(self):
        inst = ips.IPInstance(c=[-3.0], qdiag=[1], A=[[1]], b=[2.0], ub=[9])
        res = ips.solve(inst)
        assert res.r.tolist() == [2]
        assert res.objective == -4.0

    def test_lex_tiebreak_on_small_instances(self):
        # equal weights, shared capacity: the exhaustive path returns the
        # lexicographically smallest minimizer
        inst = ips.IPInstance(c=[-1.0, -1.0], qdiag=[0, 0], A=[[1, 1]], b=[1.0],
                              ub=[1, 1], n_swaps=0)
        res = ips.solve(inst)
        assert res.r.tolist() == [0, 1]


class TestExactness:
    def test_matches_bruteforce_on_seeded_instances(self):
        rng = np.random.default_rng(1234)
        for _ in range(300):
            inst = random_instance(rng)
            res = ips.solve(inst, time_budget=None)
            assert res.optimal
            obj, swaps, r = enumerate_optimum(inst)
            assert res.objective_exact == obj
            assert int(res.r[:inst.n_swaps].sum()) == swaps
            # the decision itself must be feasible
            assert (inst.A @ res.r <= np.floor(inst.b) + 1e-9).all()

    def test_monotone_in_rhs(self):
        rng = np.random.default_rng(77)
        for _ in range(60):
            inst = random_instance(rng, dmax=6, max_rows=6)
            res1 = ips.solve(inst, time_budget=None)
            relaxed = ips.IPInstance(inst.c, inst.qdiag, inst.A,
                                     inst.b + rng.integers(0, 3, size=inst.b.shape[0]),
                                     inst.ub, inst.n_swaps)
            res2 = ips.solve(relaxed, time_budget=None)
            assert res2.objective_exact <= res1.objective_exact

    def test_zero_always_feasible_so_optimum_nonpositive(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            inst = random_instance(rng, dmax=8)
            res = ips.solve(inst, time_budget=None)
            assert res.objective_exact <= 0


class TestBudget:
    def test_node_budget_flags_nonoptimal(self):
        rng = np.random.default_rng(3)
        inst = random_instance(rng, dmax=12, max_space=20000)
        res = ips.solve(inst, node_budget=2, time_budget=None)
        assert not res.optimal
        # the fallback is still a feasible decision
        assert (inst.A @ res.r <= np.floor(inst.b) + 1e-9).all()


class TestDump:
    def test_round_trip(self):
        rng = np.random.default_rng(9)
        inst = random_instance(rng)
        text = ips.dump_instance(inst)
        back = ips.parse_instance(text)
        assert np.array_equal(back.A, inst.A)
        assert np.array_equal(back.ub, inst.ub)
        assert back.n_swaps == inst.n_swaps
        assert np.array_equal(back.c, inst.c)
        assert np.array_equal(back.b, inst.b)
        r1 = ips.solve(inst, time_budget=None)
        r2 = ips.solve(back, time_budget=None)
        assert r1.objective_exact == r2.objective_exact
