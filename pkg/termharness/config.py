import logging
import os
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError
from .grpo import GrpoConfig
from .rewards import RewardConfig
from .subagent import SubagentConfig
from .terminal import OUTPUT_LIMIT

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "termharness.yaml"
ENV_PREFIX = "TERMHARNESS_"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GatewaySettings(_Section):
    backend: str = Field("live", pattern="^(live|scripted)$")
    base_url: str = "http://localhost:8000/v1"
    fixture: Optional[str] = None
    main_model: str = "main-agent"
    subagent_model: str = "terminus-4b"
    plan_model: str = "plan-model"
    grader_model: str = "grader-model"
    judge_model: str = "judge-model"
    concurrency: int = Field(8, ge=1)
    retries: int = Field(3, ge=0)
    backoff_seconds: float = Field(1.0, ge=0)
    request_timeout_seconds: float = Field(120.0, gt=0)
    temperature: float = Field(0.0, ge=0)
    max_output_tokens: int = Field(4096, ge=1)
    token_counter: str = "approx"

    @model_validator(mode="after")
    def _scripted_needs_fixture(self):
        if self.backend == "scripted" and not self.fixture:
            raise ValueError("gateway.fixture is required when gateway.backend is scripted")
        return self


class SandboxSettings(_Section):
    backend: str = Field("local", pattern="^(local|container)$")
    shell: str = "/bin/sh"
    container: Optional[str] = None
    container_runtime: str = "docker"
    hard_timeout_ms: int = Field(300000, ge=1)
    output_limit: int = Field(OUTPUT_LIMIT, ge=1)

    @model_validator(mode="after")
    def _container_needs_name(self):
        if self.backend == "container" and not self.container:
            raise ValueError("sandbox.container is required when sandbox.backend is container")
        return self


class PoolSettings(_Section):
    backend: str = Field("local", pattern="^(local|celery)$")
    parallelism: int = Field(8, ge=1)
    broker_url: str = "redis://localhost:6379/0"
    result_backend: str = "redis://localhost:6379/1"


class EvaluationSettings(_Section):
    judge_n_after: int = Field(5, ge=0)
    system_prompt_excerpt_chars: int = Field(2000, ge=0)
    strict_adjacency: bool = False


class PathSettings(_Section):
    run_dir: str = "runs"


class Config(_Section):
    gateway: GatewaySettings = GatewaySettings()
    sandbox: SandboxSettings = SandboxSettings()
    subagent: SubagentConfig = SubagentConfig()
    reward: RewardConfig = RewardConfig()
    grpo: GrpoConfig = GrpoConfig()
    pool: PoolSettings = PoolSettings()
    evaluation: EvaluationSettings = EvaluationSettings()
    paths: PathSettings = PathSettings()

    @model_validator(mode="before")
    @classmethod
    def _subagent_defaults_from_other_sections(cls, data):
        """Fill subagent settings that are configured elsewhere, unless given.

        The subagent model comes from ``gateway.subagent_model`` and its timeout
        ceiling from ``sandbox.hard_timeout_ms``.
        """
        if not isinstance(data, dict):
            return data
        gateway = data.get("gateway") or {}
        sandbox = data.get("sandbox") or {}
        subagent = dict(data.get("subagent") or {})
        inherited = {
            "model": gateway.get("subagent_model"),
            "timeout_ceiling_ms": sandbox.get("hard_timeout_ms"),
            "temperature": gateway.get("temperature"),
            "max_output_tokens": gateway.get("max_output_tokens"),
        }
        for key, value in inherited.items():
            if value is not None:
                subagent.setdefault(key, value)
        data = {**data, **_shared_token_budget(subagent, dict(data.get("reward") or {}))}
        if subagent:
            data["subagent"] = subagent
        return data


def _shared_token_budget(subagent, reward):
    """Give the subagent and the overlength penalty the same token budget.

    The budget may be set in either section; setting it to two different values
    is an error.
    """
    key = "max_trajectory_tokens"
    given = {section[key] for section in (subagent, reward) if section.get(key) is not None}
    if len(given) > 1:
        raise ValueError("subagent.{0} and reward.{0} must not differ".format(key))
    if not given:
        return {}
    subagent[key] = reward[key] = given.pop()
    return {"reward": reward}


def load_config(path=None, environ=None):
    """Read the configuration file and apply environment overrides.

    Without a ``path``, ``termharness.yaml`` in the current directory is used if it
    exists; otherwise all defaults apply. Overrides have the form
    ``TERMHARNESS_<SECTION>__<KEY>=<value>``, where the value is parsed as YAML.
    """
    environ = os.environ if environ is None else environ
    data = _read_config_file(path)
    _apply_environment_overrides(data, environ)
    try:
        return Config.model_validate(data)
    except ValidationError as e:
        raise ConfigError("Invalid configuration: {}".format(_summarize(e)))


def _read_config_file(path):
    if path is None:
        if not os.path.exists(DEFAULT_CONFIG_FILE):
            return {}
        path = DEFAULT_CONFIG_FILE
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError("Cannot read {}: {}".format(path, e.strerror), path=str(path))
    except yaml.YAMLError as e:
        raise ConfigError("{} is not valid YAML: {}".format(path, e), path=str(path))
    if not isinstance(data, dict):
        raise ConfigError("{} must contain a mapping".format(path), path=str(path))
    logger.debug("Read configuration from %s", path)
    return data


def _apply_environment_overrides(data, environ):
    for name, raw_value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        section, sep, key = name[len(ENV_PREFIX) :].lower().partition("__")
        if not sep or not key:
            raise ConfigError(
                "{} must have the form {}<SECTION>__<KEY>".format(name, ENV_PREFIX),
                variable=name,
            )
        section_data = data.setdefault(section, {})
        if not isinstance(section_data, dict):
            raise ConfigError("Section {} is not a mapping".format(section))
        section_data[key] = yaml.safe_load(raw_value)


def _summarize(validation_error):
    return "; ".join(
        "{}: {}".format(".".join(str(x) for x in error["loc"]) or "(root)", error["msg"])
        for error in validation_error.errors()
    )
