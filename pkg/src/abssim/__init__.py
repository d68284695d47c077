"""Parameter-server SGD simulator with adaptive bounded staleness and baseline strategies."""

from .engine import FixedLatency, GammaLatency, MetricsRecord, RunResult, StopRule, run
from .errors import ConfigError, DivergenceError, InputError
from .problems import (HyperParams, LogisticProblem, ProblemSpec, QuadraticProblem,
                       TinyMLPProblem, build_problem)
from .strategies import StrategyConfig

__version__ = "0.1.0"
