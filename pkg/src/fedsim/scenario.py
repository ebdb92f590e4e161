"""Scenario configuration and the end-to-end run driver.

A scenario is one JSON document.  Unknown keys are rejected.  The party
schedule (who answers when, who joins or leaves) is drawn once per seed and
replayed on every backend so comparisons are paired.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .backend import Backend, RoundPolicy, RoundRecord
from .fusion import FusionAlgorithm, FusionKind, GlobalModel
from .kernel import DEFAULT_HORIZON, Distribution, Kernel, make_stream
from .metrics import DEFAULT_UNIT_PRICE, RoundMetrics, RunReport, compare_reports
from .parties import (
    MembershipChange,
    PartyBehavior,
    SubmissionTrace,
    TaskSpec,
    initial_model,
    local_train_many,
    make_tasks,
    record_trace,
)
from .scaler import PodPool
from .serverless import ServerlessBackend, TriggerKind, TriggerSpec
from .topologies import CentralizedBackend, ContainerSpec, StaticTreeBackend, build_tree

log = logging.getLogger(__name__)

BACKENDS = ("centralized", "static_tree", "serverless")
CANNED = {
    "paper-latency-scaling": "paper-latency-scaling.json",
    "paper-joins": "paper-joins.json",
    "paper-active-cost": "paper-active-cost.json",
    "paper-intermittent-cost": "paper-intermittent-cost.json",
    "paper-intermittent": "paper-intermittent-cost.json",
}


class ConfigError(ValueError):
    """Invalid scenario; ``errors`` lists one message per offending field."""

    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = errors


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DistributionConfig(_Strict):
    kind: Literal["constant", "uniform", "exponential"] = "constant"
    a: float = 10.0
    b: float = 0.0

    @model_validator(mode="after")
    def _valid(self) -> DistributionConfig:
        self.build()
        return self

    def build(self) -> Distribution:
        return Distribution(self.kind, self.a, self.b)


class ChangeConfig(_Strict):
    round: int = Field(ge=1)
    count: int = Field(ge=1)
    at: float = Field(default=0.0, ge=0)


class BehaviorConfig(_Strict):
    think_time: DistributionConfig = DistributionConfig()
    dropout_prob: float = Field(default=0.0, ge=0, le=1)
    sample_fraction: float = Field(default=1.0, gt=0, le=1)
    joins: list[ChangeConfig] = []
    leaves: list[ChangeConfig] = []

    def build(self) -> PartyBehavior:
        return PartyBehavior(
            think_time=self.think_time.build(),
            dropout_prob=self.dropout_prob,
            joins=tuple(MembershipChange(c.round, c.count, c.at) for c in self.joins),
            leaves=tuple(MembershipChange(c.round, c.count, c.at) for c in self.leaves),
        )


class FusionConfig(_Strict):
    kind: FusionKind = FusionKind.FEDAVG
    prox_mu: float = Field(default=0.1, ge=0)
    local_epochs_tau: int = Field(default=1, ge=1)
    eta_local: float = Field(default=0.1, gt=0)
    server_lr: float = Field(default=1.0, gt=0)

    def build(self) -> FusionAlgorithm:
        return FusionAlgorithm(self.kind, self.prox_mu, self.local_epochs_tau)


class TriggerConfig(_Strict):
    kind: TriggerKind = TriggerKind.EVERY_K
    k: int | None = Field(default=None, ge=1)
    t: float = Field(default=60.0, gt=0)
    fraction: float = Field(default=0.5, gt=0, le=1)
    max_wait_seconds: float = Field(default=600.0, gt=0)
    predicate: str | None = None

    @model_validator(mode="after")
    def _custom(self) -> TriggerConfig:
        if self.kind is TriggerKind.CUSTOM and not self.predicate:
            raise ValueError("custom trigger needs 'predicate' as 'module:function'")
        return self

    def build(self, fanout: int) -> TriggerSpec:
        if self.kind is TriggerKind.CUSTOM:
            return TriggerSpec.custom(self.predicate)
        return TriggerSpec(self.kind, self.k or fanout, self.t, self.fraction, self.max_wait_seconds)


class RoundPolicyConfig(_Strict):
    quorum_fraction: float = Field(default=1.0, gt=0, le=1)
    response_timeout_seconds: float = Field(default=600.0, gt=0)
    min_wait_seconds: float = Field(default=0.0, ge=0)
    fail_on_no_quorum: bool = False

    def build(self) -> RoundPolicy:
        return RoundPolicy(**self.model_dump())


class ComputeConfig(_Strict):
    vcpus: int = Field(default=2, gt=0)
    ram_gb: float = Field(default=4.0, gt=0)
    per_update_cpu_seconds: float = Field(default=0.5, gt=0)
    finalize_seconds: float = Field(default=0.5, ge=0)
    startup_seconds: float = Field(default=1.5, gt=0)
    heartbeat_interval_seconds: float = Field(default=5.0, gt=0)
    heartbeat_misses: int = Field(default=3, ge=1)
    retopology_seconds: float = Field(default=2.0, ge=0)

    def build(self) -> ContainerSpec:
        return ContainerSpec(
            self.vcpus, self.ram_gb, self.per_update_cpu_seconds, self.finalize_seconds, self.startup_seconds
        )


class ScalerConfig(_Strict):
    cold_start_seconds: float = Field(default=1.5, gt=0)
    warm_start_seconds: float = Field(default=0.05, ge=0)
    idle_timeout_seconds: float = Field(default=30.0, gt=0)
    max_pods: int | None = Field(default=None, ge=1)
    trigger_tick_seconds: float = Field(default=1.0, gt=0)


class KillConfig(_Strict):
    node: str
    at: float = Field(ge=0)


class FaultConfig(_Strict):
    invocation_crash_prob: float = Field(default=0.0, ge=0, le=1)
    node_kills: list[KillConfig] = []


class SweepConfig(_Strict):
    parties: list[int] = Field(min_length=1)

    @field_validator("parties")
    @classmethod
    def _positive(cls, v: list[int]) -> list[int]:
        if any(n < 1 for n in v):
            raise ValueError("every swept party count must be >= 1")
        return v


class ScenarioConfig(_Strict):
    name: str = "custom"
    job_id: str = "job"
    backend: Literal["centralized", "static_tree", "serverless"] = "serverless"
    parties: int = Field(default=10, ge=1)
    fanout: int = Field(default=10, ge=2)
    rounds: int = Field(default=5, ge=1)
    dimension: int = Field(default=8, ge=1)
    fusion: FusionConfig = FusionConfig()
    trigger: TriggerConfig = TriggerConfig()
    round_policy: RoundPolicyConfig = RoundPolicyConfig()
    behavior: BehaviorConfig = BehaviorConfig()
    compute: ComputeConfig = ComputeConfig()
    scaler: ScalerConfig = ScalerConfig()
    faults: FaultConfig = FaultConfig()
    unit_price: float = Field(default=DEFAULT_UNIT_PRICE, ge=0)
    ancillary_containers: int = Field(default=1, ge=0)
    horizon_seconds: float = Field(default=DEFAULT_HORIZON, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    sweep: SweepConfig | None = None

    def with_(self, **changes: Any) -> ScenarioConfig:
        """Copy with top-level fields replaced and re-validated."""
        data = self.model_dump(mode="json")
        data.update(changes)
        return parse_config_dict(data)


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_config_dict(data: Any) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def parse_config(path: str | Path) -> ScenarioConfig:
    """Read and validate a scenario file; raises :class:`ConfigError`."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})"]) from None
    return parse_config_dict(data)


def default_config_json() -> str:
    return json.dumps(ScenarioConfig().model_dump(mode="json"), indent=2) + "\n"


def canned_names() -> list[str]:
    return sorted(CANNED)


def load_canned(name: str) -> ScenarioConfig:
    if name not in CANNED:
        raise ConfigError([f"unknown scenario {name!r}; choose from {', '.join(canned_names())}"])
    text = resources.files("fedsim.scenarios").joinpath(CANNED[name]).read_text(encoding="utf-8")
    return parse_config_dict(json.loads(text))


def expand_sweep(cfg: ScenarioConfig) -> list[ScenarioConfig]:
    """One config per swept party count (or ``[cfg]`` without a sweep)."""
    if cfg.sweep is None:
        return [cfg]
    return [cfg.with_(parties=n, sweep=None, name=f"{cfg.name}-n{n}") for n in cfg.sweep.parties]


# -- driver ----------------------------------------------------------------------


@dataclass
class RunResult:
    report: RunReport
    models: list[GlobalModel]
    records: dict[int, RoundRecord]
    backend: Backend = field(repr=False)


def model_digest(model: GlobalModel) -> str:
    return hashlib.sha256(np.ascontiguousarray(model.weights, dtype="<f8").tobytes()).hexdigest()[:16]


def make_backend(cfg: ScenarioConfig, kernel: Kernel, on_model) -> Backend:
    policy = cfg.round_policy.build()
    compute = cfg.compute.build()
    if cfg.backend == "centralized":
        return CentralizedBackend(kernel, policy, on_model, compute)
    if cfg.backend == "static_tree":
        backend = StaticTreeBackend(
            kernel,
            policy,
            on_model,
            build_tree(cfg.parties, cfg.fanout),
            compute,
            heartbeat_interval=cfg.compute.heartbeat_interval_seconds,
            heartbeat_misses=cfg.compute.heartbeat_misses,
            retopology_seconds=cfg.compute.retopology_seconds,
        )
        for kill in cfg.faults.node_kills:
            if kill.node not in backend.state:
                raise ConfigError([f"faults.node_kills: no tree node {kill.node!r}"])
            backend.schedule_kill(kill.node, kill.at)
        return backend
    sc = cfg.scaler
    pool = PodPool(kernel, sc.cold_start_seconds, sc.warm_start_seconds, sc.idle_timeout_seconds, sc.max_pods)
    return ServerlessBackend(
        kernel,
        policy,
        on_model,
        job_id=cfg.job_id,
        trigger=cfg.trigger.build(cfg.fanout),
        fanout=cfg.fanout,
        compute=compute,
        pool=pool,
        crash_prob=cfg.faults.invocation_crash_prob,
        tick_seconds=sc.trigger_tick_seconds,
    )


def record_scenario_trace(cfg: ScenarioConfig) -> SubmissionTrace:
    return record_trace(
        cfg.parties, cfg.rounds, cfg.behavior.build(), cfg.seed, cfg.behavior.sample_fraction
    )


def run_scenario(cfg: ScenarioConfig, trace: SubmissionTrace | None = None) -> RunResult:
    """Run ``cfg.rounds`` rounds on ``cfg.backend`` and collect the report.

    Raises :class:`~fedsim.kernel.HorizonExceeded` or
    :class:`~fedsim.backend.RoundFailed` from inside the simulation.
    """
    if cfg.sweep is not None:
        raise ConfigError(["sweep: expand the sweep before running (see expand_sweep)"])
    trace = trace or record_scenario_trace(cfg)
    tasks = make_tasks(trace.all_parties, TaskSpec(dimension=cfg.dimension), cfg.seed)
    algorithm = cfg.fusion.build()
    eta = cfg.fusion.eta_local
    kernel = Kernel(cfg.seed, cfg.horizon_seconds)
    noise = make_stream(cfg.seed, "grad-noise")
    models = [initial_model(cfg.dimension, cfg.seed, cfg.fusion.server_lr)]
    state = {"done": False}

    def submit_all(model: GlobalModel, pids, delays: dict) -> None:
        now = kernel.now
        live = [p for p in pids if delays[p] is not None]
        times = [now + delays[p] for p in live]
        updates = local_train_many(model, [tasks[p] for p in live], algorithm, eta, times, noise_rng=noise)
        for at, upd in zip(times, updates):
            kernel.schedule(at, backend.submit, upd)

    def open_round(model: GlobalModel) -> None:
        rt = trace[model.round]
        backend.open_round(model, rt.participants)
        submit_all(model, rt.participants, rt.delays)
        if rt.joiners:
            kernel.schedule(kernel.now + rt.join_at, joiners_arrive, (model, rt))

    def joiners_arrive(item) -> None:
        model, rt = item
        backend.join(rt.joiners)
        if backend.admits_joiners_mid_round:
            submit_all(model, rt.joiners, rt.joiner_delays)

    def on_model(model: GlobalModel, rec: RoundRecord) -> None:
        models.append(model)
        if rec.round >= cfg.rounds:
            state["done"] = True
        else:
            kernel.schedule(kernel.now, open_round, model)

    backend = make_backend(cfg, kernel, on_model)
    kernel.schedule(0.0, open_round, models[0])
    kernel.run_until(lambda: state["done"])
    if not state["done"]:
        raise RuntimeError(f"simulation went quiet after {len(models) - 1} of {cfg.rounds} rounds")
    end = kernel.now
    backend.stop()
    usage = backend.usage(end)
    rounds = [RoundMetrics.from_record(backend.records[r]) for r in sorted(backend.records)]
    extra: dict[str, Any] = {"nodes": usage.nodes, "ancillary_containers": cfg.ancillary_containers}
    if isinstance(backend, ServerlessBackend):
        extra.update(cold_starts=backend.pool.cold_starts, warm_starts=backend.pool.warm_starts)
    if isinstance(backend, StaticTreeBackend):
        extra.update(failures_detected=backend.failures_detected)
    report = RunReport.build(
        backend.name,
        rounds,
        usage.container_seconds + cfg.ancillary_containers * end,
        usage.busy_seconds,
        cfg.unit_price,
        scenario=cfg.name,
        seed=cfg.seed,
        parties=len(trace.all_parties),
        duration_seconds=end,
        model_digest=model_digest(models[-1]),
        extra=extra,
    )
    return RunResult(report, models, dict(backend.records), backend)


def compare(cfg: ScenarioConfig, backends: Sequence[str]) -> tuple[list[RunResult], dict[str, Any]]:
    """Run several backends on one recorded party trace."""
    if len(backends) < 2:
        raise ConfigError(["compare needs at least two backends"])
    unknown = [b for b in backends if b not in BACKENDS]
    if unknown:
        raise ConfigError([f"unknown backend(s) {unknown}; choose from {list(BACKENDS)}"])
    trace = record_scenario_trace(cfg)
    results = [run_scenario(cfg.with_(backend=b), trace) for b in backends]
    return results, compare_reports([r.report for r in results])
