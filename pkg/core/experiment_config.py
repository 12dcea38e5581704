# core/experiment_config.py
"""The composed experiment configuration and its mapping to/from INI sections of strings."""
import enum

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils import constants
from .contrastive import AugmentSpec, LocalTrainConfig, MiningConfig
from .errors import ConfigError
from .federation import FederationConfig
from .geo import DEFAULT_POSITIVE_RADIUS_M
from .hierarchy import ClusterSpec
from .model import EmbedderSpec
from .partition import PartitionSpec
from .synthdata import WorldSpec


class RunMode(str, enum.Enum):
    CENTRALIZED = constants.MODE_CENTRALIZED
    FEDERATED = constants.MODE_FEDERATED
    HIERARCHICAL = constants.MODE_HIERARCHICAL


def _int_tuple(value):
    if isinstance(value, str):
        return tuple(int(part) for part in value.split(",") if part.strip())
    if isinstance(value, int):
        return (value,)
    return value


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: RunMode = RunMode.FEDERATED
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    manifest_path: str | None = None
    partition_path: str | None = None
    workers: int = Field(1, ge=1)
    epochs: int = Field(20, ge=0)
    patience: int = Field(5, ge=0)  # 0 disables early stopping
    save_checkpoints: bool = True

    @field_validator("seeds", mode="before")
    @classmethod
    def _parse_seeds(cls, value):
        return _int_tuple(value)

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, value):
        if not value or any(s < 0 for s in value):
            raise ValueError(f"seeds must be a non-empty list of non-negative ints, got {value}")
        if len(set(value)) != len(value):
            raise ValueError(f"seeds must be distinct, got {value}")
        return value


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    ks: tuple[int, ...] = (1, 5, 10)
    positive_radius: float = Field(DEFAULT_POSITIVE_RADIUS_M, gt=0)
    per_query: bool = False

    @field_validator("ks", mode="before")
    @classmethod
    def _parse_ks(cls, value):
        return _int_tuple(value)

    @field_validator("ks")
    @classmethod
    def _check_ks(cls, value):
        if not value or any(k < 1 for k in value):
            raise ValueError(f"ks must be a non-empty list of counts >= 1, got {value}")
        return tuple(sorted(set(value)))


# INI section name -> ExperimentConfig field
SECTIONS = {
    "run": "run", "world": "world", "partition": "partition", "model": "model", "mining": "mining",
    "augment": "augment", "local": "local", "federation": "federation", "hierarchy": "hierarchy", "eval": "eval",
}
# fields that never go to INI (derived at run time)
_NOT_SERIALIZED = {("hierarchy", "clusters")}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    run: RunConfig = RunConfig()
    world: WorldSpec = WorldSpec()
    partition: PartitionSpec = PartitionSpec()
    model: EmbedderSpec = EmbedderSpec()
    mining: MiningConfig = MiningConfig()
    augment: AugmentSpec = AugmentSpec()
    local: LocalTrainConfig = LocalTrainConfig()
    federation: FederationConfig = FederationConfig()
    hierarchy: ClusterSpec = ClusterSpec()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check_cross_fields(self):
        if self.run.manifest_path is None and self.model.input_dim != self.world.feature_dim:
            raise ValueError(f"model.input_dim ({self.model.input_dim}) must equal world.feature_dim "
                             f"({self.world.feature_dim})")
        if self.run.mode == RunMode.HIERARCHICAL and self.federation.fedvc:
            raise ValueError("FedVC is only supported in flat federated mode")
        return self

    @classmethod
    def from_sections(cls, sections: dict) -> "ExperimentConfig":
        """Builds and validates from {section: {key: string}}; empty strings mean unset."""
        unknown = set(sections) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        data = {SECTIONS[name]: {k: v for k, v in values.items() if str(v).strip() != ""}
                for name, values in sections.items()}
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration:\n{e}") from e

    def to_sections(self) -> dict:
        sections = {}
        for name, attr in SECTIONS.items():
            part = getattr(self, attr)
            values = {}
            for key in type(part).model_fields:
                if (name, key) in _NOT_SERIALIZED:
                    continue
                text = format_value(getattr(part, key))
                if text is not None:
                    values[key] = text
            sections[name] = values
        return sections

    def with_overrides(self, **section_updates) -> "ExperimentConfig":
        """New validated config with {section: {key: value}} updates applied."""
        sections = self.to_sections()
        for name, updates in section_updates.items():
            for key, value in updates.items():
                text = format_value(value)
                if text is None:
                    sections.setdefault(name, {}).pop(key, None)
                else:
                    sections.setdefault(name, {})[key] = text
        return ExperimentConfig.from_sections(sections)


def format_value(value) -> str | None:
    """INI text for a config value; None for unset values."""
    if value is None:
        return None
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(":".join(repr(float(x)) for x in pair) for pair in value)
        return ",".join(str(v) for v in value)
    return str(value)
