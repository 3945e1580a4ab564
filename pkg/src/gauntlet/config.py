"""Experiment configuration: one JSON document, schema-validated.

Every knob lives in a fixed-field section; unknown keys are rejected
before any state is touched. CLI flags override file values, the
GAUNTLET_SEED environment variable overrides the file seed, and the
merged effective config is echoed into the output directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from decimal import Decimal
from pathlib import Path
from typing import Any, Mapping

from .backends import ConfusionMatrix
from .core import DEFAULT_CATEGORIES, GradePolicy
from .errors import ConfigError
from .profiles import PROFILE_PRESETS
from .service import (
    DEFAULT_PER_SOLVE_RATE,
    DEFAULT_SELECTION_WEIGHTS,
    DIFFICULTY_LEVELS,
    ServiceConfig,
)
from .solver import StageLatencies

SCENARIOS = (
    "campaign",
    "flexibility",
    "ip-study",
    "adaptability",
    "blocking",
    "concurrency",
    "dedup",
    "oracle",
)


@dataclass(frozen=True)
class ServiceSettings:
    difficulty: str = "moderate"
    double_prompt_probability: float | None = None
    flexibility_scale: float | None = None
    policy: str = "default"  # "default" | "strict"
    payload_ttl_ms: int = 5_000
    token_ttl_ms: int = 120_000
    session_ttl_ms: int = 120_000
    secret: str = "desk-scale-secret"
    tiles_per_round: int = 9
    selection_weights: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_SELECTION_WEIGHTS)
    )
    reuse_probability: float = 0.2039
    min_submit_gap_ms: int = 0
    concurrency_cap: int = 100
    ip_window_ms: int = 60_000
    ip_window_max: int = 1_000_000
    per_solve_rate: str = str(DEFAULT_PER_SOLVE_RATE)
    flagged_sessions_earn: bool = True
    adaptive: bool = False

    def build(self) -> ServiceConfig:
        if self.policy == "default":
            policy = GradePolicy.default()
        elif self.policy == "strict":
            policy = GradePolicy.strict()
        else:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.difficulty not in DIFFICULTY_LEVELS:
            raise ConfigError(f"unknown difficulty {self.difficulty!r}")
        return ServiceConfig(
            categories=DEFAULT_CATEGORIES,
            tiles_per_round=self.tiles_per_round,
            payload_ttl_ms=self.payload_ttl_ms,
            token_ttl_ms=self.token_ttl_ms,
            session_ttl_ms=self.session_ttl_ms,
            secret=self.secret,
            difficulty=self.difficulty,
            double_prompt_probability=self.double_prompt_probability,
            flexibility_scale=self.flexibility_scale,
            selection_weights={int(k): float(v) for k, v in self.selection_weights.items()},
            reuse_probability=self.reuse_probability,
            min_submit_gap_ms=self.min_submit_gap_ms,
            concurrency_cap=self.concurrency_cap,
            ip_window_ms=self.ip_window_ms,
            ip_window_max=self.ip_window_max,
            per_solve_rate=Decimal(self.per_solve_rate),
            flagged_sessions_earn=self.flagged_sessions_earn,
            adaptive=self.adaptive,
            policy=policy,
        )


@dataclass(frozen=True)
class SolverSettings:
    backend: str = "oracle"  # "oracle" | "identity" | "multilabel"
    confusion_diagonal: float = 0.88
    confusion_diagonals: dict[str, float] | None = None
    tau: int = 0
    latencies: dict[str, int] = field(default_factory=dict)
    profile: str = "bot_webdriver"
    save_images: bool = False
    verify_token: bool = True

    def build_matrix(self) -> ConfusionMatrix:
        if self.backend == "identity":
            return ConfusionMatrix.identity()
        if self.confusion_diagonals:
            return ConfusionMatrix.from_diagonals(
                {str(k): float(v) for k, v in self.confusion_diagonals.items()}
            )
        return ConfusionMatrix.uniform_diagonal(self.confusion_diagonal)

    def build_latencies(self) -> StageLatencies:
        allowed = {"acquire_ms", "download_ms", "solve_ms", "submit_ms"}
        unknown = set(self.latencies) - allowed
        if unknown:
            raise ConfigError(f"unknown latency keys: {sorted(unknown)}")
        return StageLatencies(**{k: int(v) for k, v in self.latencies.items()})

    def validate(self) -> None:
        if self.backend not in ("oracle", "identity", "multilabel"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if not 0 <= self.tau <= 64:
            raise ConfigError("tau must be in [0, 64]")
        if self.profile not in PROFILE_PRESETS:
            raise ConfigError(f"unknown profile preset {self.profile!r}")
        self.build_matrix()
        self.build_latencies()


@dataclass(frozen=True)
class Counts:
    sessions: int = 270
    concurrency: int = 1
    iterations: int = 10
    trials_per_row: int = 10_000
    registrations: int = 400
    corpus_total: int = 48_330
    corpus_clusters: int = 1_985
    corpus_redundant: int = 9_854
    write_corpus_files: bool = False

    def validate(self) -> None:
        for name in ("sessions", "concurrency", "iterations", "trials_per_row", "registrations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"counts.{name} must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1
    scenario: str = "campaign"
    clock: str = "simulated"  # "simulated" | "live"
    service: ServiceSettings = field(default_factory=ServiceSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    counts: Counts = field(default_factory=Counts)

    def validate(self) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.clock not in ("simulated", "live"):
            raise ConfigError("clock must be 'simulated' or 'live'")
        self.service.build()
        self.solver.validate()
        self.counts.validate()
        return self

    def to_json_dict(self) -> dict:
        def section(obj) -> dict:
            out = {}
            for f in fields(obj):
                out[f.name] = getattr(obj, f.name)
            return out

        return {
            "seed": self.seed,
            "scenario": self.scenario,
            "clock": self.clock,
            "service": section(self.service),
            "solver": section(self.solver),
            "counts": section(self.counts),
        }


def _build_section(cls, data: Mapping[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    top_known = {"seed", "scenario", "clock", "service", "solver", "counts"}
    unknown = set(data) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key in ("seed", "scenario", "clock"):
        if key in data:
            kwargs[key] = data[key]
    if "service" in data:
        svc = dict(data["service"])
        if "selection_weights" in svc:
            svc["selection_weights"] = {int(k): float(v) for k, v in svc["selection_weights"].items()}
        kwargs["service"] = _build_section(ServiceSettings, svc, "service")
    if "solver" in data:
        kwargs["solver"] = _build_section(SolverSettings, dict(data["solver"]), "solver")
    if "counts" in data:
        kwargs["counts"] = _build_section(Counts, dict(data["counts"]), "counts")
    return ExperimentConfig(**kwargs).validate()


def load_config_data(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return data


def load_config(path: str | Path) -> ExperimentConfig:
    return config_from_dict(load_config_data(path))


# Frozen per-scenario defaults. The blocking and ip-study scenarios use the
# calibrated solver accuracy (0.96 diagonal): with the default policy and
# shape the oracle then puts moderate at 91.9% and difficult at 87.4%,
# inside the acceptance windows around the documented registration rates.
SCENARIO_DEFAULTS: dict[str, dict] = {
    "campaign": {
        "counts": {"sessions": 270},
        "solver": {
            "confusion_diagonal": 0.88,
            "latencies": {"acquire_ms": 9_000, "solve_ms": 3_790, "submit_ms": 5_970},
            "save_images": True,
        },
    },
    "flexibility": {
        "counts": {"trials_per_row": 10_000},
        "service": {
            "selection_weights": {4: 1.0},
            "reuse_probability": 0.95,
        },
    },
    "ip-study": {
        "counts": {"sessions": 200},
        "solver": {"confusion_diagonal": 0.96},
    },
    "adaptability": {
        "counts": {"sessions": 100},
        "solver": {"confusion_diagonal": 0.96},
    },
    "blocking": {
        "counts": {"registrations": 400},
        "solver": {"confusion_diagonal": 0.96},
    },
    "concurrency": {
        "counts": {"sessions": 50, "iterations": 10},
        "service": {"concurrency_cap": 25},
        "solver": {"backend": "identity"},
    },
    "dedup": {},
    "oracle": {},
}


def _layer(base: dict, over: Mapping[str, Any]) -> dict:
    """Two-level merge: section dicts merge key-wise, scalars replace."""
    out = dict(base)
    for key, value in over.items():
        if key in ("service", "solver", "counts") and isinstance(value, Mapping):
            merged = dict(out.get(key, {}))
            merged.update(value)
            out[key] = merged
        else:
            out[key] = value
    return out


def scenario_config(
    scenario: str,
    file_data: Mapping[str, Any] | None = None,
    seed: int | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Assemble the effective config: scenario defaults <- file <- overrides;
    an explicit seed argument wins over all of them."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    data: dict[str, Any] = _layer({"scenario": scenario}, SCENARIO_DEFAULTS[scenario])
    if file_data:
        data = _layer(data, file_data)
    if overrides:
        data = _layer(data, overrides)
    data["scenario"] = scenario
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data)
