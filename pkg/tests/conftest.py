import numpy as np
import pytest

from abssim.problems import LogisticProblem, QuadraticProblem, TinyMLPProblem


@pytest.fixture
def quad():
    return QuadraticProblem.synthetic(dim=6, samples=120, seed=1, condition=5.0, noise=0.5)


@pytest.fixture
def logistic():
    return LogisticProblem.synthetic(dim=8, samples=64, seed=7)


@pytest.fixture
def mlp():
    return TinyMLPProblem.synthetic(widths=(3, 5, 1), samples=40, seed=2)


@pytest.fixture(params=["quadratic", "logistic", "tiny-mlp"])
def any_problem(request):
    if request.param == "quadratic":
        return QuadraticProblem.synthetic(dim=6, samples=120, seed=1, condition=5.0, noise=0.5)
    if request.param == "logistic":
        return LogisticProblem.synthetic(dim=8, samples=64, seed=7, l2=0.01)
    return TinyMLPProblem.synthetic(widths=(3, 5, 1), samples=40, seed=2)


def central_difference(fun, w, rel_step=1e-6):
    g = np.zeros_like(w)
    for i in range(len(w)):
        h = rel_step * (1.0 + abs(w[i]))
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (fun(w + e) - fun(w - e)) / (2 * h)
    return g
