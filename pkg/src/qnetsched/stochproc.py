"""Stochastic processes driving the queues: arrivals, losses, demand, advance.

Per-step event order (the timing the model prescribes): snapshot the state,
draw losses on the snapshot (fresh arrivals are immune), draw arrivals and
demand arrivals, let the policy decide, apply the decision through the
conflict engine, then advance. One RNG stream per run, with draws in fixed
order (losses, arrivals, demands) over fixed queue order, so trajectories
are bit-reproducible."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .netmodel import TransitionSystem


class InvariantViolation(RuntimeError):
    """A queue went negative: the conflict engine let an infeasible op through."""


@dataclass
class SystemState:
    q: np.ndarray  # ebits per queue
    d: np.ndarray  # pending demands per queue
    t: int = 0

    def copy(self) -> "SystemState":
        return SystemState(self.q.copy(), self.d.copy(), self.t)


@dataclass
class StepRealization:
    a: np.ndarray  # ebit arrivals
    l: np.ndarray  # losses
    b: np.ndarray  # demand arrivals


@dataclass
class TrafficModel:
    kind: str  # poisson | batch
    beta: np.ndarray | None = None  # per-queue demand rate (Hz), poisson mode
    count: int = 0  # batch size per service queue
    period: float = 0.0  # seconds between batches


@dataclass
class StochasticParams:
    """Physical-layer parameters in per-second units plus the step length."""

    alpha: np.ndarray  # per-queue generation rate (Hz), zero off physical queues
    eta: float  # per-step memory survival probability
    traffic: TrafficModel
    dt: float  # step duration (s)
    cap: int | None = None  # optional per-physical-queue generation cap
    bsm_factor: float = 1.0  # generation-rate multiplier (1/2 to mimic a latching BSM)
    alpha_fn: object = None  # optional callable step -> per-queue arrival means
    _period_steps: Fraction = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")
        if not (0.0 < self.bsm_factor <= 1.0):
            raise ValueError("bsm_factor must lie in (0, 1]")
        if self.cap is not None and self.cap < 1:
            raise ValueError("cap must be >= 1 when present")
        if self.traffic.kind == "batch":
            # batch timing in units of steps; the float ratio is snapped to
            # the nearest integer when the inputs clearly intend one (10 ms
            # over 1 us must fire at step 10000, not at 10001 because of
            # binary rounding of the decimals)
            ratio = Fraction(float(self.traffic.period)) / Fraction(float(self.dt))
            nearest = round(ratio)
            if nearest > 0 and abs(ratio - nearest) <= nearest * Fraction(1, 10**9):
                ratio = Fraction(nearest)
            self._period_steps = ratio

    @property
    def arrival_mean(self) -> np.ndarray:
        return self.bsm_factor * self.alpha * self.dt


def eta_from_tau(dt: float, tau: float) -> float:
    """Survival probability of a stored qubit over one step of length dt."""
    return math.exp(-dt / tau)


def suggested_dt(cap: int, rate_hz: float) -> float:
    """Step length matching one generation round: memory cap over link rate."""
    return cap / rate_hz


def make_params(system: TransitionSystem, alpha_hz: float, beta_hz,
                dt: float, eta: float | None = None, tau: float | None = None,
                cap: int | None = None, bsm_factor: float = 1.0,
                traffic_kind: str = "poisson", batch_count: int = 0,
                batch_period: float = 0.0) -> StochasticParams:
    """Build per-queue parameter vectors for a transition system.

    beta_hz is either a scalar applied to every service queue or a mapping
    queue-pair -> rate. A directly supplied eta wins over tau.
    """
    nq = system.n_queues
    alpha = np.where(system.physical, float(alpha_hz), 0.0)
    beta = np.zeros(nq)
    if isinstance(beta_hz, dict):
        for pair, rate in beta_hz.items():
            key = tuple(sorted(pair))
            beta[system.queue_index[key]] = float(rate)
    elif beta_hz:
        raise ValueError("scalar beta is ambiguous; pass {pair: rate}")
    if eta is None:
        if tau is None:
            raise ValueError("need eta or tau")
        eta = eta_from_tau(dt, tau)
    if traffic_kind == "poisson":
        traffic = TrafficModel("poisson", beta=beta)
    elif traffic_kind == "batch":
        traffic = TrafficModel("batch", beta=beta, count=batch_count, period=batch_period)
    else:
        raise ValueError(f"unknown traffic model {traffic_kind!r}")
    return StochasticParams(alpha=alpha, eta=float(eta), traffic=traffic, dt=dt,
                            cap=cap, bsm_factor=bsm_factor)


def sample_losses(state: SystemState, params: StochasticParams,
                  rng: np.random.Generator) -> np.ndarray:
    # drawn on the start-of-step snapshot: ebits arriving this step are immune
    if params.eta >= 1.0:
        return np.zeros_like(state.q)
    return rng.binomial(state.q, 1.0 - params.eta)


def sample_arrivals(state: SystemState, params: StochasticParams,
                    rng: np.random.Generator) -> np.ndarray:
    if params.alpha_fn is not None:
        mean = np.asarray(params.alpha_fn(state.t), dtype=float)
    else:
        mean = params.arrival_mean
    a = rng.poisson(mean)
    if params.cap is not None:
        room = np.maximum(params.cap - state.q, 0)
        a = np.minimum(a, np.where(mean > 0, room, 0))
    return a.astype(np.int64)


def batches_due(params: StochasticParams, t: int) -> int:
    """How many batch instants k*period fall inside step t (exact arithmetic)."""
    ps = params._period_steps
    if ps == 0:
        raise ValueError("batch traffic needs a positive period")
    upto = Fraction(t) // ps + 1  # batches with k*period <= t*dt
    before = Fraction(t - 1) // ps + 1 if t >= 1 else 0
    return int(upto - before)


def sample_demands(state: SystemState, params: StochasticParams,
                   rng: np.random.Generator) -> np.ndarray:
    traffic = params.traffic
    if traffic.kind == "poisson":
        return rng.poisson(traffic.beta * params.dt).astype(np.int64)
    served_queues = traffic.beta > 0
    due = batches_due(params, state.t)
    b = np.zeros_like(state.q)
    if due:
        b[served_queues] = traffic.count * due
    return b


def draw_step(state: SystemState, params: StochasticParams,
              rng: np.random.Generator) -> StepRealization:
    """Draw one step's randomness in the fixed order losses, arrivals, demands."""
    l = sample_losses(state, params, rng)
    a = sample_arrivals(state, params, rng)
    b = sample_demands(state, params, rng)
    return StepRealization(a=a, l=l, b=b)


def advance(state: SystemState, realization: StepRealization,
            applied_r: np.ndarray, system: TransitionSystem) -> SystemState:
    """Advance one step with an already-feasible (engine-clipped) decision."""
    q = state.q - realization.l + realization.a + system.M_tilde @ applied_r
    if (q < 0).any():
        bad = int(np.argmin(q))
        raise InvariantViolation(
            f"queue {system.queue_labels()[bad]} driven to {int(q[bad])}; "
            "the conflict engine admitted an infeasible decision")
    d = np.maximum(state.d + realization.b + system.N_tilde @ applied_r, 0)
    return SystemState(q=q, d=d, t=state.t + 1)
