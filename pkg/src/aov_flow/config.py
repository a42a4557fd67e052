"""Configuration handling for aov-flow.

Precedence: explicit keyword overrides (command-line flags) > environment >
``flow.toml`` > built-in defaults.
"""

from __future__ import annotations

import logging
import os
import tomllib
from pathlib import Path
from typing import Any

from .executor import STRATEGIES, UPDATE_TRIGGERS, ExecutorConfig
from .llm import DEFAULT_API_BASE, DEFAULT_MODEL, ProviderConfig
from .logs import REDACTED
from .planner import DEFAULT_CONTEXT_BUDGET, PlannerConfig

DEFAULT_CONFIG_FILE = Path("flow.toml")

DEFAULTS: dict[str, Any] = {
    "planner": "mock",
    "agents": "stub",
    "k": 3,
    "temperature": 0.7,
    "max_parse_retries": 2,
    "strategy": "batch_update",
    "update_trigger": "on_completion",
    "max_concurrent": 8,
    "max_refinement_rounds": 10,
    "verify": True,
    "stub_latency": 0.0,
    "api_key": "",
    "api_base": DEFAULT_API_BASE,
    "model": DEFAULT_MODEL,
    "timeout": 120.0,
    "retries": 3,
    "max_inflight_requests": 8,
    "context_budget": DEFAULT_CONTEXT_BUDGET,
    "seed": 0,
    "out_dir": None,
    "log_level": "info",
}

_INT_KEYS = ("k", "max_parse_retries", "max_concurrent", "max_refinement_rounds", "retries")
_INT_KEYS += ("max_inflight_requests", "context_budget", "seed")
_FLOAT_KEYS = ("temperature", "stub_latency", "timeout")


def get_api_key() -> str | None:
    return os.environ.get("FLOW_API_KEY") or None


def get_api_base() -> str | None:
    return os.environ.get("FLOW_API_BASE") or None


def get_model() -> str | None:
    return os.environ.get("FLOW_MODEL") or None


def get_log_level() -> str | None:
    return os.environ.get("FLOW_LOG_LEVEL") or None


def _read_config_file(path: Path, required: bool) -> tuple[dict[str, Any], list[str]]:
    """Flat key/value table from ``path``; a missing default file is not an error."""
    if not path.exists():
        return {}, [f"config file not found: {path}"] if required else []
    try:
        with open(path, "rb") as f:
            values = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        return {}, [f"cannot read config file {path}: {exc}"]
    errors = [f"unknown config key in {path}: {key}" for key in values if key not in DEFAULTS]
    return {k: v for k, v in values.items() if k in DEFAULTS}, errors


class Config:
    """Effective configuration for one invocation."""

    def __init__(self, config_file: Path | None = None, **overrides: Any):
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise TypeError(f"unknown config keys: {', '.join(sorted(unknown))}")

        self.config_file = config_file if config_file is not None else DEFAULT_CONFIG_FILE
        file_values, self._file_errors = _read_config_file(self.config_file, required=config_file is not None)
        env_values = {
            "api_key": get_api_key(),
            "api_base": get_api_base(),
            "model": get_model(),
            "log_level": get_log_level(),
        }

        self.sources: dict[str, str] = {}
        values: dict[str, Any] = {}
        for key, default in DEFAULTS.items():
            for source, layer in (("flag", overrides), ("env", env_values), ("file", file_values)):
                if layer.get(key) is not None:
                    values[key] = layer[key]
                    self.sources[key] = source
                    break
            else:
                values[key] = default
                self.sources[key] = "default"
        self._values = values

        self.planner: str = values["planner"]
        self.agents: str = values["agents"]
        self.k: int = values["k"]
        self.temperature: float = values["temperature"]
        self.max_parse_retries: int = values["max_parse_retries"]
        self.strategy: str = values["strategy"]
        self.update_trigger: str = values["update_trigger"]
        self.max_concurrent: int = values["max_concurrent"]
        self.max_refinement_rounds: int = values["max_refinement_rounds"]
        self.verify: bool = values["verify"]
        self.stub_latency: float = values["stub_latency"]
        self.api_key: str = values["api_key"]
        self.api_base: str = values["api_base"]
        self.model: str = values["model"]
        self.timeout: float = values["timeout"]
        self.retries: int = values["retries"]
        self.max_inflight_requests: int = values["max_inflight_requests"]
        self.context_budget: int = values["context_budget"]
        self.seed: int = values["seed"]
        self.out_dir: Path | None = Path(values["out_dir"]) if values["out_dir"] is not None else None
        self.log_level: str = values["log_level"]

    @property
    def needs_provider(self) -> bool:
        return self.planner == "llm" or self.agents == "llm"

    def validate(self) -> list[str]:
        """Validate configuration. Returns list of errors."""
        errors = list(self._file_errors)
        for key in _INT_KEYS:
            value = self._values[key]
            if not isinstance(value, int) or isinstance(value, bool):
                errors.append(f"{key} must be an integer, got {value!r}")
        for key in _FLOAT_KEYS:
            value = self._values[key]
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                errors.append(f"{key} must be a number, got {value!r}")
        if not isinstance(self.verify, bool):
            errors.append(f"verify must be true or false, got {self.verify!r}")
        if errors:
            return errors

        if self.planner not in ("mock", "llm"):
            errors.append(f"planner must be 'mock' or 'llm', got {self.planner!r}")
        if self.agents not in ("stub", "llm"):
            errors.append(f"agents must be 'stub' or 'llm', got {self.agents!r}")
        if self.k < 1:
            errors.append("k must be at least 1")
        if not 0.0 <= self.temperature <= 2.0:
            errors.append("temperature must be in [0, 2]")
        if self.max_parse_retries < 0:
            errors.append("max_parse_retries must be nonnegative")
        if self.strategy not in STRATEGIES:
            errors.append(f"strategy must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        if self.update_trigger not in UPDATE_TRIGGERS:
            errors.append(f"update_trigger must be one of {', '.join(UPDATE_TRIGGERS)}, got {self.update_trigger!r}")
        if self.max_concurrent < 1:
            errors.append("max_concurrent must be at least 1")
        if self.max_refinement_rounds < 0:
            errors.append("max_refinement_rounds must be nonnegative")
        if self.stub_latency < 0:
            errors.append("stub_latency must be nonnegative")
        if self.timeout <= 0:
            errors.append("timeout must be positive")
        if self.context_budget < 1:
            errors.append("context_budget must be positive")
        if self.seed < 0:
            errors.append("seed must be nonnegative")
        if not isinstance(logging.getLevelName(str(self.log_level).upper()), int):
            errors.append(f"unknown log level {self.log_level!r}")
        if self.needs_provider:
            errors.extend(self.provider_config().validate())
        return errors

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            k=self.k,
            temperature=self.temperature,
            max_parse_retries=self.max_parse_retries,
            context_budget=self.context_budget,
        )

    def executor_config(self) -> ExecutorConfig:
        return ExecutorConfig(
            strategy=self.strategy,  # type: ignore[arg-type]
            max_concurrent=self.max_concurrent,
            max_refinement_rounds=self.max_refinement_rounds,
            verify_completions=self.verify,
            update_trigger=self.update_trigger,  # type: ignore[arg-type]
        )

    def provider_config(self) -> ProviderConfig:
        return ProviderConfig(
            base_url=self.api_base,
            api_key=self.api_key,
            model=self.model,
            timeout=self.timeout,
            attempts=self.retries,
            max_inflight=self.max_inflight_requests,
        )

    def as_dict(self) -> dict[str, Any]:
        """Effective values with the api key redacted."""
        values = dict(self._values)
        if values["api_key"]:
            values["api_key"] = REDACTED
        if values["out_dir"] is not None:
            values["out_dir"] = str(values["out_dir"])
        return values
