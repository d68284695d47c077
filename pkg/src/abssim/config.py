"""Run configuration: a YAML tree validated into nested pydantic models."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .engine import GammaLatency, StopRule
from .errors import ConfigError
from .problems import HyperParams, ProblemSpec
from .strategies import KINDS, StrategyConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemSection(_Strict):
    kind: Literal["quadratic", "logistic", "tiny-mlp"] = "quadratic"
    dim: int = Field(10, ge=1)
    samples: int = Field(1000, ge=1)
    seed: int = 0
    condition: float = Field(10.0, ge=1.0)
    curvature: float = Field(1.0, gt=0)
    noise: float = Field(1.0, ge=0)
    label_noise: float = Field(0.1, ge=0, le=0.5)
    l2: float = Field(0.0, ge=0)
    widths: list[int] = [4, 8, 1]

    def spec(self) -> ProblemSpec:
        return ProblemSpec(kind=self.kind, dim=self.dim, samples=self.samples, seed=self.seed,
                           condition=self.condition, curvature=self.curvature, noise=self.noise,
                           label_noise=self.label_noise, l2=self.l2, widths=tuple(self.widths))


class StrategySection(_Strict):
    kind: Literal[KINDS]  # type: ignore[valid-type]
    k0: Optional[int] = Field(None, ge=1)
    a: Optional[float] = None
    loss_mode: Literal["exact", "ema"] = "exact"
    loss_period: int = Field(10, ge=1)
    k_period: int = Field(1, ge=1)
    fixed_k: bool = False
    ema_decay: float = Field(0.9, ge=0, lt=1)

    @model_validator(mode="after")
    def _needs(self):
        if self.kind == "abs" and self.a is None:
            raise ValueError("strategy kind 'abs' requires the offset 'a'")
        if self.a is not None and self.a != self.a:
            raise ValueError("'a' must not be NaN")
        if self.kind not in ("local_sgd", "asgd") and self.k0 is None:
            raise ValueError(f"strategy kind {self.kind!r} requires 'k0'")
        return self


class HyperSection(_Strict):
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(32, ge=1)
    local_steps: int = Field(10, ge=1)


class LatencySection(_Strict):
    shape: float = Field(2.0, gt=0)
    scale: float = Field(1.0, gt=0)
    multipliers: Optional[list[float]] = None


class StopSection(_Strict):
    max_rounds: int = Field(300, ge=1)
    target_loss: Optional[float] = None
    halt_at_target: bool = True


class RunConfig(_Strict):
    scenario: str = "scenario"
    problem: ProblemSection = ProblemSection()
    n_workers: int = Field(ge=1)
    strategy: StrategySection
    hyper: HyperSection = HyperSection()
    latency: LatencySection = LatencySection()
    seeds: list[int] = Field(min_length=1)
    stop: StopSection = StopSection()
    output_dir: str = "out"
    theory: bool = True

    @model_validator(mode="after")
    def _cross(self):
        n = self.n_workers
        k0 = self.strategy.k0
        if k0 is not None and k0 > n:
            raise ValueError(f"strategy.k0={k0} exceeds n_workers={n}")
        if self.problem.samples % n:
            raise ValueError(f"problem.samples={self.problem.samples} is not divisible by n_workers={n}")
        if self.hyper.batch_size > self.problem.samples // n:
            raise ValueError("hyper.batch_size exceeds the per-worker partition size")
        if self.latency.multipliers is not None:
            if len(self.latency.multipliers) != n:
                raise ValueError("latency.multipliers needs one entry per worker")
            if min(self.latency.multipliers) <= 0:
                raise ValueError("latency.multipliers must be positive")
        return self

    def problem_spec(self) -> ProblemSpec:
        return self.problem.spec()

    def strategy_config(self) -> StrategyConfig:
        s = self.strategy
        if s.kind == "local_sgd":
            k0 = self.n_workers
        elif s.kind == "asgd":
            k0 = 1
        else:
            k0 = s.k0
        return StrategyConfig(kind=s.kind, k0=k0, a=s.a, loss_mode=s.loss_mode,
                              loss_period=s.loss_period, k_period=s.k_period,
                              fixed_k=s.fixed_k, ema_decay=s.ema_decay)

    def hyper_params(self) -> HyperParams:
        return HyperParams(self.hyper.lr, self.hyper.batch_size, self.hyper.local_steps)

    def latency_model(self) -> GammaLatency:
        return GammaLatency(self.latency.shape, self.latency.scale, self.latency.multipliers)

    def stop_rule(self) -> StopRule:
        return StopRule(self.stop.max_rounds, self.stop.target_loss, self.stop.halt_at_target)


def _first_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    path = ".".join(str(p) for p in err["loc"])
    return ConfigError(err["msg"], path)


def parse_config(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise _first_error(exc) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse YAML: {exc}") from exc
    return parse_config(data)
