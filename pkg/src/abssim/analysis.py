"""Convergence-theory quantities and Monte Carlo checks of their ingredients.

The bound routines are plain arithmetic.  The estimators work on the
desk-scale problems, where the smoothness constant and the optimum are
available analytically or by a tight reference solve.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize, nnls

from .errors import InputError
from .problems import LogisticProblem, Problem, QuadraticProblem

GAMMA_CAP = 0.99
N_SE = 4.0


@dataclass
class TheoryConstants:
    smoothness: float
    sigma2: float
    m_g: float
    gamma: float
    m: int
    loss0: float
    loss_opt: float
    k0: int
    local_steps: int
    rounds: int

    def validate(self):
        if not self.smoothness > 0:
            raise InputError("smoothness must be positive")
        if self.sigma2 < 0 or self.m_g < 0:
            raise InputError("variance constants must be non-negative")
        if not 0 <= self.gamma < 1:
            raise InputError("gamma must lie in [0, 1)")
        if self.m < 1 or self.k0 < 1 or self.local_steps < 1 or self.rounds < 1:
            raise InputError("m, k0, local_steps and rounds must be >= 1")
        if self.loss0 < self.loss_opt:
            raise InputError("initial loss is below the optimal loss")
        return self

    def to_dict(self):
        return asdict(self)


def theorem1_bound(c: TheoryConstants, lr: float) -> float:
    """Ergodic bound on ``(1/T) sum_t ||grad F(w^t)||^2`` for a fixed step size."""
    c.validate()
    if not lr > 0:
        raise InputError("lr must be positive")
    gap = 1.0 - c.gamma
    first = 2.0 * (c.loss0 - c.loss_opt) / (c.rounds * lr * c.local_steps * gap)
    second = c.smoothness * lr * c.sigma2 / (c.k0 * c.m * gap)
    return first + second


def step_size_limit(c: TheoryConstants, k_values: Iterable[int]) -> float:
    """Largest step allowed by the side condition, over every K^t in ``k_values``."""
    return min(1.0 / (c.smoothness * (c.m_g / (c.k0 * c.m) + 1.0 / k)) for k in k_values)


@dataclass
class CorollaryStep:
    lr: float
    limit: float
    satisfied: bool


def corollary1_lr(c: TheoryConstants, k_values: Iterable[int] | None = None) -> CorollaryStep:
    """Step size minimising the bound, plus whether it meets the side condition.

    ``k_values`` defaults to ``[k0]``, which gives the tightest limit.
    """
    c.validate()
    if not c.sigma2 > 0:
        raise InputError("the optimal step is undefined for sigma2 = 0")
    lr = math.sqrt(2.0 * (c.loss0 - c.loss_opt) * c.k0 * c.m
                   / (c.rounds * c.local_steps * c.smoothness * c.sigma2))
    limit = step_size_limit(c, k_values if k_values is not None else [c.k0])
    return CorollaryStep(lr, limit, lr <= limit)


def power_iteration(A, tol=1e-10, max_iter=100_000, seed=0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix."""
    A = np.asarray(A, dtype=float)
    v = np.random.default_rng(seed).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        Av = A @ v
        lam_new = float(v @ Av)
        norm = np.linalg.norm(Av)
        if norm == 0:
            return 0.0
        v = Av / norm
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def reference_optimum(problem: Problem) -> float:
    """Optimal loss: closed form for quadratics, a tight L-BFGS solve otherwise."""
    if isinstance(problem, QuadraticProblem):
        return problem.optimal_loss
    res = minimize(problem.loss, problem.initial_model(), jac=problem.grad,
                   method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000})
    return float(res.fun)


def sample_variance(problem: Problem, w) -> float:
    """Single-sample gradient variance ``mean_i ||g_i(w) - grad F(w)||^2`` over the whole dataset.

    A batch of B samples drawn with replacement has variance ``sample_variance / B``.
    """
    G = problem.sample_grads(w, np.arange(problem.n_samples))
    return float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)))


def fit_variance_model(problem: Problem, points: Sequence[np.ndarray]):
    """Non-negative fit of ``sample_variance(w) ~ sigma2 + m_g * ||grad F(w)||^2``."""
    x = np.array([float(np.sum(problem.grad(w) ** 2)) for w in points])
    y = np.array([sample_variance(problem, w) for w in points])
    # round-off at a stationary point counts as zero
    if np.all(x <= 1e-20 * max(1.0, float(y.max()))):
        raise InputError("all sampled gradients are zero; cannot fit the variance model")
    (sigma2, m_g), _ = nnls(np.column_stack([np.ones_like(x), x]), y)
    return float(sigma2), float(m_g)


def estimate_constants(problem: Problem, points: Sequence[np.ndarray], batch_size: int,
                       k0: int, local_steps: int, rounds: int, delay_ratio: float = 0.0,
                       full_batch: bool = False) -> TheoryConstants:
    """Constants for the bound, measured on ``problem``.

    ``delay_ratio`` is the largest realised ``||gF(w^t) - gF(w^{t-tau})||^2 / ||gF(w^t)||^2``
    from a run; it is clipped to [0, 0.99].  With ``full_batch`` there is
    no sampling noise and both variance constants are zero.
    """
    if isinstance(problem, QuadraticProblem):
        smoothness = power_iteration(problem.A)
    elif isinstance(problem, LogisticProblem):
        smoothness = problem.smoothness
    else:
        raise InputError("constants are only available for quadratic and logistic problems")
    if full_batch:
        sigma2, m_g = 0.0, 0.0
    else:
        sigma2, m_g = fit_variance_model(problem, points)
    loss0 = problem.loss(problem.initial_model())
    return TheoryConstants(
        smoothness=smoothness, sigma2=sigma2, m_g=m_g,
        gamma=float(min(max(delay_ratio, 0.0), GAMMA_CAP)), m=int(batch_size),
        loss0=loss0, loss_opt=min(reference_optimum(problem), loss0),
        k0=int(k0), local_steps=int(local_steps), rounds=int(rounds),
    ).validate()


def _batch_grads(problem: Problem, w, batch_size, trials, rng, chunk=10_000):
    """``trials`` independent batch gradients at ``w``, sampled with replacement from all data."""
    if batch_size >= problem.n_samples:
        return np.tile(problem.grad(w), (trials, 1))
    out = []
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        idx = rng.integers(0, problem.n_samples, size=(n, batch_size))
        out.append(problem.sample_grads(w, idx).mean(axis=1))
    return np.concatenate(out)


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


@dataclass
class LemmaReport:
    lhs: float
    rhs: float
    lhs_se: float
    rhs_se: float
    holds: bool

    @property
    def margin(self):
        return self.rhs - self.lhs


def lemma1_check(problem: Problem, w, delayed_w, batch_size: int, trials: int, rng) -> LemmaReport:
    """Estimate both sides of the stale-gradient error decomposition independently.

    With ``v`` a batch gradient at ``delayed_w``:
    ``E||v - gF(w)||^2 = E||v||^2 - ||gF(w')||^2 + ||gF(w) - gF(w')||^2``.
    """
    if trials < 10_000:
        raise InputError("need at least 10,000 trials")
    g_now, g_old = problem.grad(w), problem.grad(delayed_w)
    v1 = _batch_grads(problem, delayed_w, batch_size, trials, rng)
    v2 = _batch_grads(problem, delayed_w, batch_size, trials, rng)
    lhs, lhs_se = _mean_se(np.sum((v1 - g_now) ** 2, axis=1))
    shift = float(np.sum((g_now - g_old) ** 2)) - float(g_old @ g_old)
    rhs, rhs_se = _mean_se(np.sum(v2 ** 2, axis=1) + shift)
    slack = 1e-12 * max(1.0, abs(lhs), abs(rhs))
    holds = abs(lhs - rhs) <= N_SE * math.hypot(lhs_se, rhs_se) + slack
    return LemmaReport(lhs, rhs, lhs_se, rhs_se, holds)


def lemma2_check(problem: Problem, models: Sequence[np.ndarray], batch_size: int, trials: int,
                 rng, sigma2: float, m_g: float, m: int) -> LemmaReport:
    """Compare ``E||sum_k g_k||^2`` against ``K sigma2/m + (m_g/m + 1) sum_k ||gF(w_k)||^2``.

    ``holds`` is False only when the Monte Carlo estimate exceeds the bound by
    more than four standard errors.
    """
    total = np.zeros((trials, problem.dim))
    for w in models:
        total += _batch_grads(problem, w, batch_size, trials, rng)
    lhs, lhs_se = _mean_se(np.sum(total ** 2, axis=1))
    grad_sq = sum(float(np.sum(problem.grad(w) ** 2)) for w in models)
    rhs = len(models) * sigma2 / m + (m_g / m + 1.0) * grad_sq
    slack = 1e-12 * max(1.0, abs(lhs), abs(rhs))
    return LemmaReport(lhs, rhs, lhs_se, 0.0, lhs - N_SE * lhs_se <= rhs + slack)


@dataclass
class Significance:
    fraction: float
    skipped: int
    counted: int


def significance_fraction(trace: Iterable[tuple], percent: float) -> Significance:
    """Share of updates ``u`` with ``||u|| / ||w|| >= percent / 100`` (Euclidean norms).

    Entries with a zero-norm model are skipped and tallied.
    """
    hits = counted = skipped = 0
    for u, w in trace:
        wn = float(np.linalg.norm(w))
        if wn == 0:
            skipped += 1
            continue
        counted += 1
        if float(np.linalg.norm(u)) / wn >= percent / 100.0:
            hits += 1
    if counted == 0 and skipped == 0:
        raise InputError("empty update trace")
    return Significance(hits / counted if counted else 0.0, skipped, counted)


def theory_report(problem: Problem, results, batch_size: int, k0: int, local_steps: int,
                  lr: float, n_workers: int, max_points: int = 20) -> dict:
    """Bound-versus-measurement summary for a set of tracked runs (one per seed)."""
    if not isinstance(problem, (QuadraticProblem, LogisticProblem)):
        return {"skipped": "no analytic smoothness constant for this problem"}
    traces = [t for r in results for t in r.traces]
    if not traces:
        return {"skipped": "no tracked rounds"}
    stride = max(1, len(traces) // max_points)
    points = [t.model for t in traces[::stride]]
    delay_ratio = max(r.delay_ratio for r in results)
    rounds = max(len(r.grad_sq) for r in results)
    c = estimate_constants(problem, points, batch_size, k0, local_steps, rounds,
                           delay_ratio=delay_ratio)
    limit = step_size_limit(c, range(k0, n_workers + 1))
    per_seed = []
    for r in results:
        c_seed = TheoryConstants(**{**c.to_dict(), "rounds": len(r.grad_sq)})
        bound = theorem1_bound(c_seed, lr)
        avg = float(np.mean(r.grad_sq))
        per_seed.append({"rounds": len(r.grad_sq), "bound": bound,
                         "empirical_avg_grad_sq": avg, "bound_holds": avg <= bound})
    return {
        "constants": c.to_dict(),
        "realised_delay_ratio": delay_ratio,
        "lr": lr,
        "step_limit": limit,
        "side_condition_ok": lr <= limit,
        "bound": theorem1_bound(c, lr),
        "empirical_avg_grad_sq": float(np.mean([s["empirical_avg_grad_sq"] for s in per_seed])),
        "bound_holds": all(s["bound_holds"] for s in per_seed),
        "per_seed": per_seed,
    }
