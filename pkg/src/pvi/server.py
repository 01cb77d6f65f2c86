"""The coordinator: factor registry, schedules, damped aggregation and the async simulator."""

from __future__ import annotations

import heapq
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .expfam import ApproxFactor, GaussianMeanField, NotNormalizable, fisher_vector_product
from .localopt import (CavityNotNormalizable, LocalProblem, OptimizerConfig, natural_gradient_target,
                       optimize_local)
from .models import Estimator, ModelSpec

log = logging.getLogger(__name__)

SCHEDULES = ("sequential_fixed", "sequential_random", "synchronous", "asynchronous")


class RejectedUnnormalizable(NotNormalizable):
    pass


@dataclass(frozen=True, eq=False)
class ServerState:
    prior: GaussianMeanField
    q: GaussianMeanField
    factors: tuple[ApproxFactor, ...]
    iteration: int = 0
    comms: int = 0
    logical_time: float = 0.0
    seed: int = 0

    @property
    def M(self) -> int:
        return len(self.factors)

    def factorization_error(self) -> float:
        e1 = self.prior.eta1 + sum(f.eta1 for f in self.factors)
        e2 = self.prior.eta2 + sum(f.eta2 for f in self.factors)
        return float(max(np.max(np.abs(e1 - self.q.eta1)), np.max(np.abs(e2 - self.q.eta2))))

    def to_dict(self) -> dict:
        return {"prior": self.prior.to_dict(), "q": self.q.to_dict(),
                "factors": [f.to_dict() for f in self.factors], "iteration": self.iteration,
                "comms": self.comms, "logical_time": self.logical_time, "seed": self.seed}


@dataclass(frozen=True)
class Schedule:
    kind: str = "sequential_fixed"
    rho: float | None = None
    rounds: int = 20
    tol: float = 1e-6
    policy: str = "halve_rho"
    max_retries: int = 5
    duration_base: float = 1.0
    duration_per_point: float = 0.01
    duration_jitter: float = 0.1
    slowdown: tuple[float, ...] = ()
    threads: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.rho is not None and not 0 < self.rho <= 1:
            raise ValueError("damping rho must lie in (0, 1]")
        if self.policy not in ("halve_rho", "abort"):
            raise ValueError("policy must be 'halve_rho' or 'abort'")
        if self.rounds < 0 or self.max_retries < 0:
            raise ValueError("rounds and max_retries must be non-negative")
        object.__setattr__(self, "slowdown", tuple(float(s) for s in self.slowdown))

    def damping(self, M: int) -> float:
        if self.rho is not None:
            if self.kind in ("synchronous", "asynchronous") and self.rho > 1.0 / M + 1e-12:
                warnings.warn(f"damping {self.rho} exceeds 1/M = {1.0 / M:.4g}; parallel updates may be unstable",
                              stacklevel=3)
            return self.rho
        return 1.0 if self.kind.startswith("sequential") else 1.0 / M

    def duration(self, client: int, n_points: int, rng: np.random.Generator) -> float:
        slow = self.slowdown[client] if client < len(self.slowdown) else 1.0
        return slow * (self.duration_base + self.duration_per_point * n_points) + self.duration_jitter * rng.random()


@dataclass(frozen=True)
class Delta:
    client: int
    factor_change: ApproxFactor
    staleness: int = 0

    def __post_init__(self):
        if self.staleness < 0:
            raise ValueError("staleness must be non-negative")


@dataclass
class MetricsTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsTrace":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


@dataclass
class RunResult:
    state: ServerState
    trace: MetricsTrace
    rejections: int = 0
    skipped: int = 0


# ---------------------------------------------------------------------------
# state transitions


def init(prior: GaussianMeanField, M: int, seed: int = 0) -> ServerState:
    if M < 1:
        raise ValueError("need at least one client")
    prior.check()
    return ServerState(prior, prior, tuple(ApproxFactor.unit(prior.dim, m) for m in range(M)), seed=seed)


def client_order(schedule: Schedule, M: int, round_index: int, seed: int) -> list[int]:
    if schedule.kind == "sequential_random":
        return [int(k) for k in np.random.default_rng([seed, round_index]).permutation(M)]
    return list(range(M))


def select(state: ServerState, schedule: Schedule) -> list[int]:
    """Clients refined at the state's current iteration (async picks come from run_async's queue)."""
    M = state.M
    if schedule.kind in ("synchronous", "asynchronous"):
        return list(range(M))
    order = client_order(schedule, M, state.iteration // M, state.seed)
    return [order[state.iteration % M]]


def apply_deltas(state: ServerState, deltas: Sequence[Delta], rho: float) -> ServerState:
    """Add rho times each factor change; rejects the whole commit if q would be unnormalizable."""
    owners = [d.client for d in deltas]
    if len(set(owners)) != len(owners):
        raise ValueError("each client may contribute at most one delta per commit")
    factors = list(state.factors)
    e1, e2 = np.array(state.q.eta1), np.array(state.q.eta2)
    for d in deltas:
        step = d.factor_change.scaled(rho)
        factors[d.client] = factors[d.client].plus(step)
        e1 = e1 + step.eta1
        e2 = e2 + step.eta2
    q = GaussianMeanField(e1, e2)
    if not q.is_normalizable():
        dims = q.unnormalizable_dims()
        raise RejectedUnnormalizable(f"commit would leave eta2 >= 0 in dimensions {list(dims)[:10]}", dims)
    return replace(state, q=q, factors=tuple(factors), iteration=state.iteration + 1)


def _client_seed(seed: int, iteration: int, client: int) -> int:
    return int(np.random.SeedSequence([seed, iteration, client]).generate_state(1)[0])


def _local_delta(state: ServerState, q_snapshot: GaussianMeanField, client: int, data: Dataset,
                 model: ModelSpec, config: OptimizerConfig, iteration: int) -> ApproxFactor | None:
    problem = LocalProblem(q_snapshot, state.factors[client], data, model)
    cfg = replace(config, seed=_client_seed(config.seed, iteration, client))
    try:
        return optimize_local(problem, cfg).delta
    except CavityNotNormalizable:
        log.warning("client %d skipped: cavity not normalizable", client)
        return None


def _commit(state: ServerState, deltas: list[Delta], rho: float, schedule: Schedule):
    """apply_deltas with the retry policy; returns (state, rho_used, rejections)."""
    rejections = 0
    while True:
        try:
            return apply_deltas(state, deltas, rho), rho, rejections
        except RejectedUnnormalizable:
            rejections += 1
            if schedule.policy == "abort" or rejections > schedule.max_retries:
                raise
            rho = rho / 2.0
            log.info("commit rejected; retrying with rho=%g", rho)


Evaluate = Callable[[GaussianMeanField], dict]


def _record(trace: MetricsTrace, state: ServerState, evaluate: Evaluate | None, client: int, staleness: int,
            rho: float, rejections: int = 0) -> None:
    rec = {"i": state.iteration, "comms": state.comms, "logical_time": state.logical_time, "client": client,
           "staleness": staleness, "rho_effective": rho, "rejections": rejections}
    if evaluate is not None:
        rec.update(evaluate(state.q))
    trace.append(rec)


def run(state: ServerState, schedule: Schedule, clients: Sequence[Dataset], model: ModelSpec,
        config: OptimizerConfig = OptimizerConfig(), evaluate: Evaluate | None = None) -> RunResult:
    """Sequential or synchronous PVI for ``schedule.rounds`` rounds or until converged."""
    if len(clients) != state.M:
        raise ValueError(f"{len(clients)} client datasets for {state.M} factors")
    if schedule.kind == "asynchronous":
        return run_async(state, schedule, clients, model, config, evaluate)
    M = state.M
    rho = schedule.damping(M)
    trace = MetricsTrace()
    _record(trace, state, evaluate, -1, 0, rho)
    total_rej = skipped = 0
    pool = ThreadPoolExecutor(schedule.threads) if schedule.threads > 1 else None
    try:
        for r in range(schedule.rounds):
            start = state.q
            if schedule.kind == "synchronous":
                snap = state
                jobs = [(snap, snap.q, k, clients[k], model, config, snap.iteration) for k in range(M)]
                results = list(pool.map(lambda a: _local_delta(*a), jobs)) if pool else \
                    [_local_delta(*a) for a in jobs]
                deltas = [Delta(k, d) for k, d in enumerate(results) if d is not None]
                skipped += M - len(deltas)
                state, used, rej = _commit(state, deltas, rho, schedule)
                total_rej += rej
                state = replace(state, comms=state.comms + M, logical_time=state.logical_time + 1.0)
                _record(trace, state, evaluate, -1, 0, used, rej)
            else:
                for k in client_order(schedule, M, r, state.seed):
                    d = _local_delta(state, state.q, k, clients[k], model, config, state.iteration)
                    if d is None:
                        skipped += 1
                        used, rej = rho, 0
                        state = replace(state, iteration=state.iteration + 1)
                    else:
                        state, used, rej = _commit(state, [Delta(k, d)], rho, schedule)
                    total_rej += rej
                    state = replace(state, comms=state.comms + 1, logical_time=state.logical_time + 1.0)
                    _record(trace, state, evaluate, k, 0, used, rej)
            moved = max(np.max(np.abs(state.q.eta1 - start.eta1)), np.max(np.abs(state.q.eta2 - start.eta2)))
            if moved < schedule.tol:
                break
    finally:
        if pool:
            pool.shutdown()
    return RunResult(state, trace, total_rej, skipped)


def run_async(state: ServerState, schedule: Schedule, clients: Sequence[Dataset], model: ModelSpec,
              config: OptimizerConfig = OptimizerConfig(), evaluate: Evaluate | None = None) -> RunResult:
    """Discrete-event simulation: each client commits as soon as its local update finishes.

    Events are ordered by (finish time, client index). The run ends after
    ``rounds * M`` commits, or earlier once every client's latest commit moved
    q by less than the schedule tolerance.
    """
    M = state.M
    rho = schedule.damping(M)
    trace = MetricsTrace()
    _record(trace, state, evaluate, -1, 0, rho)
    rngs = [np.random.default_rng([state.seed, k, 7]) for k in range(M)]
    queue, snapshots = [], {}
    for k in range(M):
        finish = state.logical_time + schedule.duration(k, len(clients[k]), rngs[k])
        heapq.heappush(queue, (finish, k))
        snapshots[k] = (state.q, state.iteration)
    total_rej = skipped = 0
    last_move = np.full(M, np.inf)
    for _ in range(schedule.rounds * M):
        finish, k = heapq.heappop(queue)
        q_snap, it_snap = snapshots[k]
        d = _local_delta(state, q_snap, k, clients[k], model, config, state.iteration)
        before = state.q
        staleness = state.iteration - it_snap
        if d is None:
            skipped += 1
            used, rej = rho, 0
            state = replace(state, iteration=state.iteration + 1)
        else:
            state, used, rej = _commit(state, [Delta(k, d, staleness)], rho, schedule)
        total_rej += rej
        state = replace(state, comms=state.comms + 1, logical_time=finish)
        _record(trace, state, evaluate, k, staleness, used, rej)
        snapshots[k] = (state.q, state.iteration)
        heapq.heappush(queue, (finish + schedule.duration(k, len(clients[k]), rngs[k]), k))
        moved = max(np.max(np.abs(state.q.eta1 - before.eta1)), np.max(np.abs(state.q.eta2 - before.eta2)))
        last_move[k] = moved
        if np.all(last_move < schedule.tol):
            break
    return RunResult(state, trace, total_rej, skipped)


# ---------------------------------------------------------------------------
# one-step dynamics


def local_natural_gradient(problem: LocalProblem, estimator: Estimator = Estimator()):
    """d F_k / d eta_q at q = q_prev, i.e. Fisher(q) applied to (dE_k/dmu - eta_k)."""
    q = problem.q_prev
    g1, g2 = natural_gradient_target(problem.model, problem.data, q, estimator)
    return fisher_vector_product(q, g1 - problem.t_prev.eta1, g2 - problem.t_prev.eta2)


def single_step_mode(state: ServerState, clients: Sequence[Dataset], model: ModelSpec, form: str, rho: float,
                     estimator: Estimator = Estimator()) -> ServerState:
    """One synchronous round in which every client takes exactly one local step from q_prev.

    ``form="gradient"``: the client moves its local q by rho times the gradient
    of its local free energy in natural coordinates. ``form="fixed_point"``:
    the client applies one damped fixed-point update to its factor.
    """
    deltas = []
    for k, data in enumerate(clients):
        problem = LocalProblem(state.q, state.factors[k], data, model)
        if form == "gradient":
            d1, d2 = local_natural_gradient(problem, estimator)
            deltas.append(Delta(k, ApproxFactor(rho * d1, rho * d2, k)))
        elif form == "fixed_point":
            g1, g2 = natural_gradient_target(model, data, state.q, estimator)
            t = state.factors[k]
            deltas.append(Delta(k, ApproxFactor(rho * (g1 - t.eta1), rho * (g2 - t.eta2), k)))
        else:
            raise ValueError("form must be 'gradient' or 'fixed_point'")
    new = apply_deltas(state, deltas, 1.0)
    return replace(new, comms=new.comms + state.M)


def posterior_distance(a: GaussianMeanField, b: GaussianMeanField) -> float:
    return float(max(np.max(np.abs(a.eta1 - b.eta1)), np.max(np.abs(a.eta2 - b.eta2))))

