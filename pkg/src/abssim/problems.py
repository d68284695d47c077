"""Desk-scale optimization problems, data partitioning and the local update rule.

Every problem is an empirical risk ``F(w) = mean_m f(w; xi_m)`` over a fixed
synthetic dataset.  Problems expose per-sample gradients so that batch
gradients, Monte Carlo checks and finite-difference tests all share one
vectorised code path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, InputError

__all__ = [
    "Problem",
    "QuadraticProblem",
    "LogisticProblem",
    "TinyMLPProblem",
    "ProblemSpec",
    "HyperParams",
    "build_problem",
    "full_loss",
    "full_gradient",
    "batch_gradient",
    "local_sgd_steps",
    "make_partition",
]


class Problem:
    """Base class: subclasses implement ``sample_losses`` and ``sample_grads``."""

    #: analytic smoothness constant (or an upper bound), None when unknown
    smoothness: float | None = None

    def __init__(self, n_samples: int, dim: int):
        self.n_samples = int(n_samples)
        self.dim = int(dim)

    def sample_losses(self, w: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_grads(self, w: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Per-sample gradients, shape ``(len(idx), dim)``."""
        raise NotImplementedError

    def loss(self, w, idx=None) -> float:
        idx = self._all() if idx is None else idx
        return float(np.mean(self.sample_losses(w, idx)))

    def grad(self, w, idx=None) -> np.ndarray:
        idx = self._all() if idx is None else idx
        return self.sample_grads(w, idx).mean(axis=0)

    def initial_model(self) -> np.ndarray:
        return np.zeros(self.dim)

    def check_model(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise InputError(f"model has shape {w.shape}, expected ({self.dim},)")
        return w

    def _all(self):
        return np.arange(self.n_samples)


class QuadraticProblem(Problem):
    """Least squares ``f(w; x, y) = 0.5 * (x.w - y)**2``.

    The full loss is ``0.5 w'Aw - b'w + c`` with ``A = X'X/M`` and ``b = X'y/M``,
    so the smoothness constant, minimiser and optimal value are all exact.
    """

    def __init__(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InputError("X and y disagree on the number of samples")
        super().__init__(X.shape[0], X.shape[1])
        self.X, self.y = X, y
        self.A = X.T @ X / self.n_samples
        self.b = X.T @ y / self.n_samples
        self.smoothness = float(np.linalg.eigvalsh(self.A)[-1])
        self.optimum = np.linalg.lstsq(self.A, self.b, rcond=None)[0]
        self.optimal_loss = self.loss(self.optimum)

    @classmethod
    def synthetic(cls, dim=10, samples=1000, seed=0, condition=10.0,
                  noise=0.1, curvature=1.0):
        """Data whose Hessian has eigenvalues log-spaced in [curvature/condition, curvature]."""
        if condition < 1 or curvature <= 0:
            raise InputError("need condition >= 1 and curvature > 0")
        if samples < dim:
            raise InputError("need at least as many samples as dimensions")
        rng = np.random.default_rng(seed)
        Q = np.linalg.qr(rng.standard_normal((samples, dim)))[0]
        V = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
        eig = curvature * condition ** (-np.linspace(0.0, 1.0, dim))
        X = np.sqrt(samples) * (Q * np.sqrt(eig)) @ V.T
        w_true = rng.standard_normal(dim)
        y = X @ w_true + noise * rng.standard_normal(samples)
        return cls(X, y)

    def sample_losses(self, w, idx):
        r = self.X[idx] @ w - self.y[idx]
        return 0.5 * r * r

    def sample_grads(self, w, idx):
        Xb = self.X[idx]
        return (Xb @ w - self.y[idx])[..., None] * Xb

    def grad(self, w, idx=None):
        if idx is None:
            return self.A @ w - self.b
        return super().grad(w, idx)


class LogisticProblem(Problem):
    """Binary logistic regression with labels in {-1, +1} and optional ridge term."""

    def __init__(self, X, y, l2=0.0):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise InputError("logistic labels must be -1 or +1")
        super().__init__(X.shape[0], X.shape[1])
        self.X, self.y, self.l2 = X, y, float(l2)
        # f'' of the logistic link is at most 1/4
        gram = X.T @ X / self.n_samples
        self.smoothness = 0.25 * float(np.linalg.eigvalsh(gram)[-1]) + self.l2

    @classmethod
    def synthetic(cls, dim=8, samples=256, seed=0, label_noise=0.1, l2=0.0):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((samples, dim))
        w_true = rng.standard_normal(dim)
        y = np.where(rng.random(samples) < expit(X @ w_true), 1.0, -1.0)
        flip = rng.random(samples) < label_noise
        y[flip] = -y[flip]
        return cls(X, y, l2=l2)

    def sample_losses(self, w, idx):
        margin = self.y[idx] * (self.X[idx] @ w)
        return np.logaddexp(0.0, -margin) + 0.5 * self.l2 * (w @ w)

    def sample_grads(self, w, idx):
        Xb, yb = self.X[idx], self.y[idx]
        coef = -yb * expit(-yb * (Xb @ w))
        return coef[..., None] * Xb + self.l2 * w


class TinyMLPProblem(Problem):
    """Regression with a small tanh network, squared error, fitted to a noisy teacher.

    ``widths`` lists layer sizes from input to the scalar output,
    e.g. ``(4, 8, 1)``.  Parameters are flattened layer by layer as
    ``W_1, b_1, W_2, b_2, ...`` with ``W_l`` of shape ``(out, in)``.
    """

    def __init__(self, X, y, widths: Sequence[int], init_seed=0):
        widths = tuple(int(v) for v in widths)
        if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
            raise InputError("widths must run from the input size down to 1")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != widths[0]:
            raise InputError("input width does not match the data")
        self.widths = widths
        self.shapes = [(o, i) for i, o in zip(widths[:-1], widths[1:])]
        dim = sum(o * i + o for o, i in self.shapes)
        super().__init__(X.shape[0], dim)
        self.X, self.y = X, np.asarray(y, dtype=float).reshape(-1)
        self.init_seed = init_seed

    @classmethod
    def synthetic(cls, widths=(4, 8, 1), samples=256, seed=0, noise=0.05):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((samples, widths[0]))
        teacher = cls(X, np.zeros(samples), widths, init_seed=seed + 1)
        y = teacher._forward(teacher.initial_model() * 2.0, X)[-1][:, 0]
        y = y + noise * rng.standard_normal(samples)
        return cls(X, y, widths, init_seed=seed + 2)

    def initial_model(self):
        rng = np.random.default_rng(self.init_seed)
        parts = []
        for o, i in self.shapes:
            parts.append(rng.standard_normal(o * i) / np.sqrt(i))
            parts.append(np.zeros(o))
        return np.concatenate(parts)

    def _unpack(self, w):
        layers, k = [], 0
        for o, i in self.shapes:
            W = w[k:k + o * i].reshape(o, i)
            k += o * i
            layers.append((W, w[k:k + o]))
            k += o
        return layers

    def _forward(self, w, X):
        acts = [X]
        layers = self._unpack(w)
        for j, (W, b) in enumerate(layers):
            z = acts[-1] @ W.T + b
            acts.append(z if j == len(layers) - 1 else np.tanh(z))
        return acts

    def sample_losses(self, w, idx):
        out = self._forward(w, self.X[idx])[-1][:, 0]
        r = out - self.y[idx]
        return 0.5 * r * r

    def sample_grads(self, w, idx):
        idx = np.asarray(idx)
        flat = idx.reshape(-1)
        acts = self._forward(w, self.X[flat])
        layers = self._unpack(w)
        delta = acts[-1] - self.y[flat][:, None]
        pieces = []
        for j in range(len(layers) - 1, -1, -1):
            a_in = acts[j]
            gW = delta[:, :, None] * a_in[:, None, :]
            pieces.append(delta)
            pieces.append(gW.reshape(len(flat), -1))
            if j > 0:
                delta = (delta @ layers[j][0]) * (1.0 - a_in * a_in)
        # pieces were collected output-first as (b, W) pairs
        out = np.concatenate(pieces[::-1], axis=1)
        return out.reshape(idx.shape + (self.dim,))


@dataclass(frozen=True)
class ProblemSpec:
    kind: str = "quadratic"
    dim: int = 10
    samples: int = 1000
    seed: int = 0
    condition: float = 10.0
    curvature: float = 1.0
    noise: float = 0.1
    label_noise: float = 0.1
    l2: float = 0.0
    widths: tuple = field(default=(4, 8, 1))


def build_problem(spec: ProblemSpec) -> Problem:
    if spec.kind == "quadratic":
        return QuadraticProblem.synthetic(spec.dim, spec.samples, spec.seed,
                                          spec.condition, spec.noise, spec.curvature)
    if spec.kind == "logistic":
        return LogisticProblem.synthetic(spec.dim, spec.samples, spec.seed,
                                         spec.label_noise, spec.l2)
    if spec.kind == "tiny-mlp":
        return TinyMLPProblem.synthetic(spec.widths, spec.samples, spec.seed, spec.noise)
    raise InputError(f"unknown problem kind {spec.kind!r}")


@dataclass(frozen=True)
class HyperParams:
    lr: float = 0.1
    batch_size: int = 32
    local_steps: int = 10

    def __post_init__(self):
        # lr == 0 is accepted as a degenerate no-op; run configs require lr > 0
        if not (self.lr >= 0 and np.isfinite(self.lr)):
            raise InputError("lr must be a finite non-negative number")
        if self.batch_size < 1 or self.local_steps < 1:
            raise InputError("batch_size and local_steps must be >= 1")


def full_loss(problem: Problem, w) -> float:
    w = problem.check_model(w)
    with np.errstate(over="ignore", invalid="ignore"):
        value = problem.loss(w)
    if not np.isfinite(value):
        raise DivergenceError("full loss is not finite")
    return value


def full_gradient(problem: Problem, w) -> np.ndarray:
    return problem.grad(problem.check_model(w))


def _draw_batch(partition, batch_size, rng):
    partition = np.asarray(partition)
    n = len(partition)
    if n == 0:
        raise InputError("empty partition")
    if batch_size > n:
        raise InputError(f"batch size {batch_size} exceeds partition size {n}")
    if batch_size == n:
        # full batch: no sampling noise, no rng draw
        return partition
    return partition[rng.integers(0, n, size=batch_size)]


def batch_gradient(problem: Problem, w, partition, batch_size, rng) -> np.ndarray:
    """Mean gradient over ``batch_size`` samples drawn with replacement from ``partition``.

    When ``batch_size`` equals the partition size the whole partition is used
    once, giving the exact partition gradient.
    """
    w = problem.check_model(w)
    return problem.grad(w, _draw_batch(partition, batch_size, rng))


def local_sgd_steps(problem: Problem, w_start, hp: HyperParams, partition, rng,
                    round_index=None):
    """Run ``hp.local_steps`` mini-batch SGD steps from ``w_start``.

    Returns ``(w_end, w_start - w_end, last_batch_loss)``.  The last value is the
    mini-batch loss measured at the point where the final gradient was taken.
    """
    w = problem.check_model(w_start).copy()
    last_loss = np.nan
    with np.errstate(over="ignore", invalid="ignore"):
        for u in range(hp.local_steps):
            idx = _draw_batch(partition, hp.batch_size, rng)
            if u == hp.local_steps - 1:
                last_loss = problem.loss(w, idx)
            w = w - hp.lr * problem.grad(w, idx)
    if not (np.all(np.isfinite(w)) and np.isfinite(last_loss)):
        raise DivergenceError("local model is not finite", round_index)
    return w, w_start - w, float(last_loss)


def make_partition(n_samples: int, n_workers: int, rng) -> list[np.ndarray]:
    """Split ``range(n_samples)`` into ``n_workers`` disjoint equal shards by a random permutation."""
    if n_workers < 1 or n_samples % n_workers:
        raise InputError(f"{n_workers} workers do not divide {n_samples} samples")
    perm = rng.permutation(n_samples)
    return [np.sort(s) for s in np.split(perm, n_workers)]
