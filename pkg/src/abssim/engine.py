"""Discrete-event simulation of one parameter server and N workers.

Time only advances when a worker finishes its local computation.  Each round
the server consumes the next K^t completions, applies the aggregated update,
and pushes the new model to whichever workers the strategy selects; pushing
to a busy worker abandons its in-flight computation.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import DivergenceError, InputError
from .problems import HyperParams, Problem, full_loss, local_sgd_steps, make_partition
from .strategies import Strategy, StrategyConfig, aggregate_global


class GammaLatency:
    """Gamma-distributed compute time for a whole U-step local round.

    ``multipliers`` scales the per-worker gamma scale to create persistent
    stragglers; by default all workers share ``(shape, scale)``.
    """

    def __init__(self, shape=2.0, scale=1.0, multipliers=None):
        if not (shape > 0 and scale > 0):
            raise InputError("gamma shape and scale must be positive")
        if multipliers is not None and min(multipliers) <= 0:
            raise InputError("latency multipliers must be positive")
        self.shape = float(shape)
        self.scale = float(scale)
        self.multipliers = None if multipliers is None else [float(m) for m in multipliers]

    def worker_scale(self, worker):
        if self.multipliers is None:
            return self.scale
        return self.scale * self.multipliers[worker]

    def sample(self, worker, rng):
        return float(rng.gamma(self.shape, self.worker_scale(worker)))


class FixedLatency:
    """Deterministic per-worker compute times; draws nothing from the rng."""

    def __init__(self, times):
        if min(times) <= 0:
            raise InputError("compute times must be positive")
        self.times = [float(t) for t in times]

    def sample(self, worker, rng):
        return self.times[worker]


def sample_compute_time(latency, worker: int, rng) -> float:
    t = latency.sample(worker, rng)
    if not t > 0:
        raise InputError(f"non-positive compute time {t} for worker {worker}")
    return t


@dataclass
class WorkerState:
    worker: int
    base_model: np.ndarray
    base_round: int = 0
    busy_until: float = 0.0
    generation: int = 0
    pending_update: np.ndarray | None = None
    last_local_loss: float = math.nan


@dataclass
class SimClock:
    now: float = 0.0
    round: int = 0


class EventQueue:
    """Min-heap of ``(completion_time, worker, generation)``.

    Ties pop lowest worker id first.  Events whose generation no longer
    matches the worker's are dropped on pop.
    """

    def __init__(self):
        self._heap = []
        self.dropped = 0

    def push(self, time, worker, generation):
        heapq.heappush(self._heap, (time, worker, generation))

    def pop(self, workers):
        while self._heap:
            time, n, gen = heapq.heappop(self._heap)
            if gen == workers[n].generation:
                return time, n
            self.dropped += 1
        raise RuntimeError("event queue ran dry")

    def live(self, workers):
        return sorted(n for _, n, g in self._heap if g == workers[n].generation)

    def __len__(self):
        return len(self._heap)


def force_restart(worker: WorkerState, new_model, round_index: int, clock: SimClock,
                  latency, rng, queue: EventQueue) -> WorkerState:
    """Hand ``new_model`` to ``worker`` and start a fresh computation at ``clock.now``.

    Bumping the generation invalidates any event still queued for the worker.
    """
    worker.generation += 1
    worker.base_model = new_model
    worker.base_round = round_index
    worker.pending_update = None
    worker.busy_until = clock.now + sample_compute_time(latency, worker.worker, rng)
    queue.push(worker.busy_until, worker.worker, worker.generation)
    return worker


@dataclass(frozen=True)
class StopRule:
    max_rounds: int
    target_loss: float | None = None
    halt_at_target: bool = True

    def __post_init__(self):
        if self.max_rounds < 1:
            raise InputError("max_rounds must be >= 1")


@dataclass
class MetricsRecord:
    round: int
    sim_time: float
    loss: float
    k_t: int
    tau_t: float
    uploads: int
    downloads: int
    discarded: int
    max_staleness: int
    mean_staleness: float

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def to_row(self):
        return [getattr(self, name) for name in self.header()]

    @classmethod
    def from_row(cls, row):
        casts = {f.name: (int if f.type == "int" else float) for f in fields(cls)}
        return cls(**{k: casts[k](v) for k, v in row.items()})


@dataclass
class RoundTrace:
    round: int
    uploaders: list
    staleness: list
    threshold: float
    tau_after: list
    restarted: list
    in_flight: list
    model: np.ndarray
    update: np.ndarray


@dataclass
class RunResult:
    records: list
    final_model: np.ndarray
    loss0: float
    warnings: int = 0
    traces: list = field(default_factory=list)
    # squared full-gradient norms of w^0..w^{T-1} (tracking only)
    grad_sq: list = field(default_factory=list)
    # max ||gF(w^t) - gF(w^{t-tau})||^2 / ||gF(w^t)||^2 over consumed delays (tracking only)
    delay_ratio: float = 0.0


@dataclass
class SeedStreams:
    latency: np.random.Generator
    partition: np.random.Generator
    workers: list


def seed_streams(seed: int, n_workers: int) -> SeedStreams:
    """Independent generators: latency, data partition, then one per worker for batch sampling."""
    children = np.random.SeedSequence(seed).spawn(n_workers + 2)
    gens = [np.random.default_rng(c) for c in children]
    return SeedStreams(gens[0], gens[1], gens[2:])


def run(problem: Problem, hp: HyperParams, strategy: StrategyConfig, latency,
        n_workers: int, seed: int, stop: StopRule, track: bool = False) -> RunResult:
    """Simulate one training run.

    With ``track=True`` the result also carries per-round traces and the
    gradient statistics used by the theory checks.
    """
    if n_workers < 1:
        raise InputError("need at least one worker")
    if problem.n_samples % n_workers:
        raise InputError(f"{n_workers} workers do not divide {problem.n_samples} samples")
    if hp.batch_size > problem.n_samples // n_workers:
        raise InputError("batch size exceeds the per-worker partition")
    streams = seed_streams(seed, n_workers)
    partition = make_partition(problem.n_samples, n_workers, streams.partition)

    w = problem.initial_model()
    loss0 = full_loss(problem, w)
    policy = Strategy(strategy, n_workers, loss0)
    clock = SimClock()
    queue = EventQueue()
    workers = [WorkerState(n, w) for n in range(n_workers)]
    for state in workers:
        force_restart(state, w, 0, clock, latency, streams.latency, queue)
    uploads, downloads, discarded = 0, n_workers, 0
    records: list[MetricsRecord] = []
    result = RunResult(records, w, loss0)
    grads = []

    for t in range(stop.max_rounds):
        if track:
            grads.append(problem.grad(w))
            result.grad_sq.append(float(grads[-1] @ grads[-1]))
        k = policy.k
        threshold = policy.threshold()
        uploaders, updates, staleness, reported = [], [], [], []
        try:
            while len(uploaders) < k:
                clock.now, n = queue.pop(workers)
                state = workers[n]
                _, upd, last = local_sgd_steps(problem, state.base_model, hp,
                                               partition[n], streams.workers[n], t)
                state.pending_update, state.last_local_loss = upd, last
                uploads += 1
                uploaders.append(n)
                updates.append(upd)
                staleness.append(t - state.base_round)
                reported.append(last)
            w_prev = w
            with np.errstate(over="ignore", invalid="ignore"):
                w = aggregate_global(w, updates, k, policy.scales(staleness))
            if not np.all(np.isfinite(w)):
                raise DivergenceError("global model is not finite", t)
            loss = full_loss(problem, w)
        except DivergenceError as exc:
            raise DivergenceError("run diverged", t, records) from exc

        if track:
            for n, s in zip(uploaders, staleness):
                if s > 0:
                    g, g_old = grads[t], grads[workers[n].base_round]
                    denom = float(g @ g)
                    if denom > 0:
                        d = g - g_old
                        result.delay_ratio = max(result.delay_ratio, float(d @ d) / denom)

        restart = policy.restarts(uploaders, threshold)
        clock.round = t + 1
        for n in sorted(restart):
            if n not in uploaders:
                discarded += 1
            force_restart(workers[n], w, t + 1, clock, latency, streams.latency, queue)
        downloads += len(restart)
        policy.observe(t + 1, reported, lambda: loss)

        records.append(MetricsRecord(
            round=t + 1, sim_time=clock.now, loss=loss, k_t=k, tau_t=threshold,
            uploads=uploads, downloads=downloads, discarded=discarded,
            max_staleness=max(staleness), mean_staleness=float(np.mean(staleness)),
        ))
        if track:
            result.traces.append(RoundTrace(
                round=t, uploaders=list(uploaders), staleness=list(staleness),
                threshold=threshold, tau_after=policy.tau.tolist(),
                restarted=sorted(restart), in_flight=queue.live(workers),
                model=w_prev, update=w_prev - w,
            ))
        if stop.target_loss is not None and stop.halt_at_target and loss <= stop.target_loss:
            break

    result.final_model = w
    result.warnings = policy.warnings
    return result
