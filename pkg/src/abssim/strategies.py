"""Parameter-server decision logic: how many uploads to wait for, how to weigh
them, and which workers to push a fresh model to after each global update.

Worker ids are 0-based throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

KINDS = ("local_sgd", "k_sync", "k_async", "asgd", "adasync", "sa_adasync", "abs")
ADAPTIVE_KINDS = ("adasync", "sa_adasync", "abs")
# kinds whose restart set is the whole cluster (synchronous barrier)
BARRIER_KINDS = ("local_sgd", "k_sync")
LOSS_MODES = ("exact", "ema")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "abs"
    k0: int = 1
    a: float | None = None
    loss_mode: str = "exact"
    loss_period: int = 10
    k_period: int = 1
    fixed_k: bool = False
    ema_decay: float = 0.9

    def validate(self, n_workers: int):
        if self.kind not in KINDS:
            raise InputError(f"unknown strategy kind {self.kind!r}")
        if not 1 <= self.k0 <= n_workers:
            raise InputError(f"k0={self.k0} outside [1, {n_workers}]")
        if self.kind == "abs" and (self.a is None or math.isnan(self.a)):
            raise InputError("abs strategy needs the offset a")
        if self.kind == "abs" and self.a == -math.inf:
            raise InputError("a = -inf is not a valid offset")
        if self.loss_mode not in LOSS_MODES:
            raise InputError(f"unknown loss mode {self.loss_mode!r}")
        if self.loss_period < 1 or self.k_period < 1:
            raise InputError("loss_period and k_period must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InputError("ema_decay must lie in [0, 1)")


def update_staleness(tau, downloaded: Iterable[int]) -> np.ndarray:
    """Workers in ``downloaded`` reset to 0, every other entry grows by one."""
    out = np.asarray(tau, dtype=np.int64) + 1
    ids = list(downloaded)
    if ids:
        if min(ids) < 0 or max(ids) >= len(out):
            raise InputError("worker id out of range")
        out[ids] = 0
    return out


def abs_threshold(n_workers: int, k: int, a: float) -> float:
    if k < 1:
        raise InputError("k must be >= 1")
    return max(1.0, n_workers / k + a)


def adaptive_k(k0: int, loss0: float, loss_t: float, n_workers: int,
               previous: int | None = None) -> int:
    """``k0 * sqrt(loss0 / loss_t)`` rounded half-up, clamped to ``[max(k0, previous), n_workers]``.

    A non-positive or non-finite loss leaves K where it was.
    """
    floor = k0 if previous is None else max(k0, previous)
    if not (loss0 > 0 and loss_t > 0 and math.isfinite(loss0) and math.isfinite(loss_t)):
        return min(floor, n_workers)
    raw = k0 * math.sqrt(loss0 / loss_t)
    k = math.floor(raw + 0.5)
    return int(min(max(k, floor), n_workers))


def aggregate_global(w, updates: Sequence[np.ndarray], k: int, scales=None) -> np.ndarray:
    """``w - (1/k) * sum_j scale_j * update_j`` where each update is ``w_start - w_end``."""
    if len(updates) != k:
        raise InputError(f"expected {k} updates, got {len(updates)}")
    w = np.asarray(w, dtype=float)
    if scales is None:
        scales = [1.0] * k
    total = np.zeros_like(w)
    for s, u in zip(scales, updates):
        u = np.asarray(u, dtype=float)
        if u.shape != w.shape:
            raise InputError(f"update shape {u.shape} does not match model {w.shape}")
        total = total + s * u
    return w - total / k


def sa_scale(staleness: int) -> float:
    if staleness < 0:
        raise InputError("staleness must be non-negative")
    return 1.0 / max(1, staleness)


def select_restarts(kind: str, uploaders: Iterable[int], tau, threshold: float,
                    n_workers: int) -> set[int]:
    uploaders = set(uploaders)
    if not uploaders:
        raise InputError("no uploaders this round")
    if kind in BARRIER_KINDS:
        return set(range(n_workers))
    if kind == "abs":
        tau = np.asarray(tau)
        return uploaders | {int(n) for n in np.flatnonzero(tau > threshold)}
    return uploaders


class LossEstimator:
    """Server-side estimate of the current training loss used to grow K.

    ``exact`` refreshes from the full loss every ``period`` rounds; ``ema``
    smooths the last mini-batch losses reported alongside uploads.
    """

    def __init__(self, mode: str, loss0: float, period: int = 10, decay: float = 0.9):
        self.mode = mode
        self.loss0 = loss0
        self.period = period
        self.decay = decay
        self._value = None

    @property
    def value(self) -> float:
        return self.loss0 if self._value is None else self._value

    def report(self, loss: float):
        if self.mode != "ema":
            return
        if self._value is None:
            self._value = float(loss)
        else:
            self._value = self.decay * self._value + (1.0 - self.decay) * float(loss)

    def refresh(self, rounds_done: int, exact_loss):
        """Called after each global update; ``exact_loss`` is a zero-arg callable."""
        if self.mode == "exact" and rounds_done % self.period == 0:
            self._value = float(exact_loss())


class Strategy:
    """Mutable per-run strategy state: current K, the staleness vector and the loss estimate."""

    def __init__(self, config: StrategyConfig, n_workers: int, loss0: float):
        config.validate(n_workers)
        self.config = config
        self.kind = config.kind
        self.n_workers = n_workers
        self.loss0 = loss0
        if self.kind == "local_sgd":
            self.k = n_workers
        elif self.kind == "asgd":
            self.k = 1
        else:
            self.k = config.k0
        self.tau = np.zeros(n_workers, dtype=np.int64)
        self.estimator = LossEstimator(config.loss_mode, loss0, config.loss_period,
                                       config.ema_decay)
        self.warnings = 0

    @property
    def adaptive(self) -> bool:
        return self.kind in ADAPTIVE_KINDS and not self.config.fixed_k

    def threshold(self) -> float:
        if self.kind == "abs":
            return abs_threshold(self.n_workers, self.k, self.config.a)
        return math.inf

    def scales(self, staleness: Sequence[int]) -> list[float]:
        if self.kind == "sa_adasync":
            return [sa_scale(s) for s in staleness]
        return [1.0] * len(staleness)

    def restarts(self, uploaders: Iterable[int], threshold: float) -> set[int]:
        """Age every worker, pick who receives the new model, and zero their ages."""
        uploaders = list(uploaders)
        self.tau = update_staleness(self.tau, uploaders)
        chosen = select_restarts(self.kind, uploaders, self.tau, threshold, self.n_workers)
        self.tau[sorted(chosen)] = 0
        return chosen

    def observe(self, rounds_done: int, reported_losses: Sequence[float], exact_loss):
        for loss in reported_losses:
            self.estimator.report(loss)
        self.estimator.refresh(rounds_done, exact_loss)
        if self.adaptive and rounds_done % self.config.k_period == 0:
            est = self.estimator.value
            if not (est > 0 and math.isfinite(est)):
                self.warnings += 1
                return
            self.k = adaptive_k(self.config.k0, self.loss0, est, self.n_workers, self.k)
