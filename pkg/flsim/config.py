"""
Experiment configuration: YAML files validated into frozen pydantic models.

Every key is optional (see config/default.yaml for the defaults); unknown keys are
rejected at every nesting level.
"""
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from flsim.errors import ConfigError
from flsim.latency import ComputeConfig
from flsim.learner import TrainingHyperparams
from flsim.modem import ChannelConfig

logger = logging.getLogger(__name__)

COMPARE_SCHEMES = ("fixed2", "fixed4", "fixed8", "fixed16", "am", "layerwise")


@dataclass(frozen=True)
class Scheme:
    kind: str  # layerwise | grouped | am | fixed
    param: Optional[int] = None

    @property
    def label(self) -> str:
        """Row label used in the summary table."""
        if self.kind == "fixed":
            return f"{self.param}PSK"
        if self.kind == "am":
            return "AM"
        if self.kind == "grouped":
            return f"Proposed (g={self.param})"
        return "Proposed"

    def __str__(self) -> str:
        return f"{self.kind}{self.param}" if self.param is not None else self.kind


_SCHEME_PATTERN = re.compile(r"^(layerwise|am|fixed|grouped)(\d+)?$")


def parse_scheme(text: str) -> Scheme:
    """Parse 'layerwise', 'am', 'fixed<M>' or 'grouped<g>'."""
    match = _SCHEME_PATTERN.match(str(text).strip().lower())
    if not match:
        raise ConfigError(f"unknown scheme '{text}' (expected layerwise, am, fixed<M> or grouped<g>)")
    kind, number = match.group(1), match.group(2)
    if kind in ("fixed", "grouped"):
        if number is None or int(number) < 1:
            raise ConfigError(f"scheme '{text}' needs a positive number, e.g. {kind}4")
        return Scheme(kind, int(number))
    if number is not None:
        raise ConfigError(f"scheme '{kind}' takes no number, got '{text}'")
    return Scheme(kind)


class DatasetConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["synthetic", "idx"] = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    classes: int = Field(default=10, ge=2)
    dims: int = Field(default=784, ge=1)
    train_size: int = Field(default=10000, ge=1)
    test_size: int = Field(default=2000, ge=1)
    margin: float = Field(default=3.0, gt=0)
    noise: float = Field(default=1.0, gt=0)
    samples_per_client: Optional[int] = Field(default=None, ge=1)
    test_samples: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _paths_for_idx(self):
        if self.kind == "idx":
            missing = [
                key for key in ("train_images", "train_labels", "test_images", "test_labels") if getattr(self, key) is None
            ]
            if missing:
                raise ValueError(f"idx datasets need {', '.join(missing)}")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: Literal["mlp_small", "lenet_300_100", "small_cnn", "plain_cnn", "mlp"] = "mlp_small"
    hidden: Tuple[int, ...] = (64,)
    activation: Literal["relu", "tanh"] = "relu"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_clients: int = Field(default=10, ge=1)
    rounds: int = Field(default=50, ge=0)
    seed: int = Field(default=0, ge=0)
    scheme: str = "layerwise"
    groups: int = Field(default=5, ge=1, description="g for grouped search and the layerwise fallback")
    max_enumeration_layers: int = Field(default=12, ge=1, le=12)
    hp: TrainingHyperparams = TrainingHyperparams()
    channel: ChannelConfig = ChannelConfig()
    compute: ComputeConfig = ComputeConfig()
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    eval_every: int = Field(default=1, ge=1)
    importance_period: int = Field(default=5, ge=1, description="K, rounds between importance estimates")
    importance_batch: int = Field(default=128, ge=1)
    power_tol: float = Field(default=1e-3, gt=0)
    power_max_iters: int = Field(default=300, ge=1)
    target_accuracy: Optional[float] = Field(default=None, gt=0, le=1)
    train_eval_samples: int = Field(default=2000, ge=1)
    ideal_uplink: bool = False
    deterministic: bool = True
    n_jobs: int = 1

    @model_validator(mode="before")
    @classmethod
    def _share_client_count(cls, data):
        # n_clients lives at the top level and is mirrored into the loss-drop constants
        if isinstance(data, dict) and "n_clients" in data:
            hp = dict(data.get("hp") or {})
            if "n_clients" in hp and hp["n_clients"] != data["n_clients"]:
                raise ValueError(f"hp.n_clients={hp['n_clients']} disagrees with n_clients={data['n_clients']}")
            hp["n_clients"] = data["n_clients"]
            data = {**data, "hp": hp}
        return data

    @field_validator("scheme")
    @classmethod
    def _check_scheme(cls, value):
        try:
            return str(parse_scheme(value))
        except ConfigError as exc:
            raise ValueError(str(exc)) from None

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.hp.n_clients != self.n_clients:
            raise ValueError(f"hp.n_clients={self.hp.n_clients} disagrees with n_clients={self.n_clients}")
        scheme = parse_scheme(self.scheme)
        if scheme.kind == "fixed" and scheme.param not in self.channel.candidate_levels:
            raise ValueError(f"fixed level {scheme.param} not in candidate levels {list(self.channel.candidate_levels)}")
        return self

    @property
    def parsed_scheme(self) -> Scheme:
        return parse_scheme(self.scheme)

    @property
    def workers(self) -> int:
        return 1 if self.deterministic else self.n_jobs


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "<root>"
    if first["type"] == "extra_forbidden":
        return f"unknown key '{key}'"
    return f"invalid value for '{key}': {first['msg']}"


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    """
    Parse a YAML experiment config.

    Args:
        path: YAML file; None gives the documented defaults

    Returns:
        ExperimentConfig
    """
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    config = validate_config(data)
    logger.info(f"Loaded config from {path}")
    return config


def dump_config(config: ExperimentConfig) -> str:
    """Serialize with every field present and keys sorted (normalized form)."""
    data = config.model_dump(mode="json")
    data["hp"].pop("n_clients", None)
    return yaml.safe_dump(data, sort_keys=True)


def with_overrides(config: ExperimentConfig, **updates) -> ExperimentConfig:
    """Copy of `config` with top-level fields replaced (None values are ignored), re-validated."""
    data = config.model_dump()
    data["hp"].pop("n_clients", None)
    data.update({key: value for key, value in updates.items() if value is not None})
    return validate_config(data)
