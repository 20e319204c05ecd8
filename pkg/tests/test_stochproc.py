import math

import numpy as np
import pytest

from qnetsched import netmodel as nm
from qnetsched import stochproc as sp


def chain_system(n=4):
    names = nm.node_letters(n)
    route = tuple(names)
    return nm.build_transition_system([route], physical_edges=list(zip(names, names[1:])))


def abcd_params(system, **kw):
    defaults = dict(alpha_hz=1e6, beta_hz={("A", "D"): 3e5}, dt=1e-6, eta=0.9)
    defaults.update(kw)
    return sp.make_params(system, **defaults)


class TestArrivals:
    def test_mean_on_physical(self):
        ts = chain_system()
        params = abcd_params(ts)
        rng = np.random.default_rng(0)
        state = sp.SystemState(np.zeros(ts.n_queues, dtype=np.int64),
                               np.zeros(ts.n_queues, dtype=np.int64))
        total = np.zeros(ts.n_queues)
        n = 20000
        for _ in range(n):
            total += sp.sample_arrivals(state, params, rng)
        mean = total / n
        phys = ts.physical
        assert np.allclose(mean[phys], 1.0, atol=0.05)

    def test_virtual_always_zero(self):
        ts = chain_system()
        params = abcd_params(ts)
        rng = np.random.default_rng(1)
        state = sp.SystemState(np.zeros(ts.n_queues, dtype=np.int64),
                               np.zeros(ts.n_queues, dtype=np.int64))
        for _ in range(200):
            a = sp.sample_arrivals(state, params, rng)
            assert (a[~ts.physical] == 0).all()

    def test_cap_saturation(self):
        ts = chain_system()
        params = abcd_params(ts, cap=5)
        rng = np.random.default_rng(2)
        q = np.where(ts.physical, 5, 0).astype(np.int64)
        state = sp.SystemState(q, np.zeros(ts.n_queues, dtype=np.int64))
        for _ in range(100):
            a = sp.sample_arrivals(state, params, rng)
            assert (a == 0).all()


class TestLosses:
    def test_eta_one_no_loss(self):
        ts = chain_system()
        params = abcd_params(ts, eta=1.0)
        rng = np.random.default_rng(3)
        state = sp.SystemState(np.full(ts.n_queues, 7, dtype=np.int64),
                               np.zeros(ts.n_queues, dtype=np.int64))
        assert (sp.sample_losses(state, params, rng) == 0).all()

    def test_eta_zero_loses_all(self):
        ts = chain_system()
        params = abcd_params(ts, eta=0.0)
        rng = np.random.default_rng(4)
        state = sp.SystemState(np.full(ts.n_queues, 7, dtype=np.int64),
                               np.zeros(ts.n_queues, dtype=np.int64))
        assert (sp.sample_losses(state, params, rng) == 7).all()

    def test_loss_fraction_and_survival(self):
        # Monte-Carlo estimates against the closed forms: per-step loss
        # fraction (1 - eta) and geometric mean survival 1/(1 - eta)
        eta = sp.eta_from_tau(dt=1e-6, tau=1e-5)
        assert math.isclose(eta, math.exp(-0.1))
        rng = np.random.default_rng(5)
        steps, qsize = 100_000, 50
        losses = rng.binomial(np.full(steps, qsize), 1.0 - eta)
        frac = losses.sum() / (steps * qsize)
        p = 1.0 - eta
        sigma = math.sqrt(p * (1 - p) / (steps * qsize))
        assert abs(frac - p) < 3 * sigma

        # survival: lifetime of a cohort of ebits is geometric with mean 1/p
        n = 200_000
        lifetimes = rng.geometric(p, size=n)
        mean = lifetimes.mean()
        sigma_mean = math.sqrt(eta) / p / math.sqrt(n)
        assert abs(mean - 1.0 / p) < 3 * sigma_mean


class TestDemands:
    def test_non_service_always_zero(self):
        ts = chain_system()
        params = abcd_params(ts)
        rng = np.random.default_rng(6)
        state = sp.SystemState(np.zeros(ts.n_queues, dtype=np.int64),
                               np.zeros(ts.n_queues, dtype=np.int64))
        service = params.traffic.beta > 0
        for _ in range(200):
            b = sp.sample_demands(state, params, rng)
            assert (b[~service] == 0).all()

    def test_poisson_mean(self):
        ts = chain_system()
        params = abcd_params(ts)
        rng = np.random.default_rng(7)
        ad = ts.queue_index[("A", "D")]
        state = sp.SystemState(np.zeros(ts.n_queues, dtype=np.int64),
                               np.zeros(ts.n_queues, dtype=np.int64))
        tot = sum(sp.sample_demands(state, params, rng)[ad] for _ in range(20000))
        assert abs(tot / 20000 - 0.3) < 0.02

    def test_batch_crossings(self):
        ts = chain_system()
        params = abcd_params(ts, traffic_kind="batch", batch_count=100,
                             batch_period=0.01)
        rng = np.random.default_rng(8)
        ad = ts.queue_index[("A", "D")]
        fired = []
        for t in range(25000):
            state = sp.SystemState(np.zeros(ts.n_queues, dtype=np.int64),
                                   np.zeros(ts.n_queues, dtype=np.int64), t=t)
            b = sp.sample_demands(state, params, rng)
            if b[ad]:
                assert b[ad] == 100
                fired.append(t)
        assert fired == [0, 10000, 20000]


class TestAdvance:
    def test_walkthrough_swap(self):
        # chain ABCD at t=1: one pair in AB, two arrivals on AB, one swap at B
        ts = chain_system()
        qi = ts.queue_index
        q = np.zeros(ts.n_queues, dtype=np.int64)
        q[qi[("A", "B")]] = 1
        q[qi[("B", "C")]] = 1
        state = sp.SystemState(q, np.zeros(ts.n_queues, dtype=np.int64))
        a = np.zeros(ts.n_queues, dtype=np.int64)
        a[qi[("A", "B")]] = 2
        real = sp.StepRealization(a=a, l=np.zeros_like(a), b=np.zeros_like(a))
        r = np.zeros(ts.n_ops, dtype=np.int64)
        r[ts.transition_index[("A", "B", "C")]] = 1
        nxt = sp.advance(state, real, r, ts)
        assert nxt.q[qi[("A", "B")]] == 2
        assert nxt.q[qi[("B", "C")]] == 0
        assert nxt.q[qi[("A", "C")]] == 1
        assert nxt.t == 1

    def test_identity(self):
        ts = chain_system()
        q = np.arange(ts.n_queues, dtype=np.int64)
        d = np.arange(ts.n_queues, dtype=np.int64)[::-1].copy()
        state = sp.SystemState(q.copy(), d.copy())
        zero = np.zeros(ts.n_queues, dtype=np.int64)
        real = sp.StepRealization(zero, zero, zero)
        nxt = sp.advance(state, real, np.zeros(ts.n_ops, dtype=np.int64), ts)
        assert np.array_equal(nxt.q, q) and np.array_equal(nxt.d, d)

    def test_consumption_serves_demand(self):
        ts = chain_system()
        qi = ts.queue_index[("A", "D")]
        q = np.zeros(ts.n_queues, dtype=np.int64)
        d = np.zeros(ts.n_queues, dtype=np.int64)
        q[qi] = 1
        d[qi] = 1
        state = sp.SystemState(q, d)
        zero = np.zeros(ts.n_queues, dtype=np.int64)
        r = np.zeros(ts.n_ops, dtype=np.int64)
        r[ts.n_transitions + qi] = 1
        nxt = sp.advance(state, sp.StepRealization(zero, zero, zero), r, ts)
        assert nxt.q[qi] == 0 and nxt.d[qi] == 0

    def test_negative_queue_raises(self):
        ts = chain_system()
        state = sp.SystemState(np.zeros(ts.n_queues, dtype=np.int64),
                               np.zeros(ts.n_queues, dtype=np.int64))
        zero = np.zeros(ts.n_queues, dtype=np.int64)
        r = np.zeros(ts.n_ops, dtype=np.int64)
        r[ts.n_transitions] = 1  # consume from an empty queue
        with pytest.raises(sp.InvariantViolation):
            sp.advance(state, sp.StepRealization(zero, zero, zero), r, ts)

    def test_conservation_per_step(self):
        ts = chain_system()
        rng = np.random.default_rng(11)
        params = abcd_params(ts)
        state = sp.SystemState(rng.integers(0, 5, ts.n_queues),
                               rng.integers(0, 3, ts.n_queues))
        real = sp.draw_step(state, params, rng)
        # feasible decision: one swap with both parents guaranteed
        avail = state.q - real.l + real.a
        r = np.zeros(ts.n_ops, dtype=np.int64)
        c = ts.transition_index[("A", "B", "C")]
        p1, p2, _ = ts.swap_rows(c)
        if avail[p1] >= 1 and avail[p2] >= 1:
            r[c] = 1
        nxt = sp.advance(state, real, r, ts)
        units = int(r.sum())
        assert nxt.q.sum() == state.q.sum() - real.l.sum() + real.a.sum() - units


class TestDeterminism:
    def test_same_seed_same_trajectory(self):
        ts = chain_system()
        params = abcd_params(ts)

        def trajectory(seed):
            rng = np.random.default_rng(seed)
            state = sp.SystemState(np.zeros(ts.n_queues, dtype=np.int64),
                                   np.zeros(ts.n_queues, dtype=np.int64))
            out = []
            for _ in range(50):
                real = sp.draw_step(state, params, rng)
                state = sp.advance(state, real, np.zeros(ts.n_ops, dtype=np.int64), ts)
                out.append((state.q.copy(), state.d.copy()))
            return out

        t1, t2 = trajectory(123), trajectory(123)
        for (q1, d1), (q2, d2) in zip(t1, t2):
            assert np.array_equal(q1, q2) and np.array_equal(d1, d2)
