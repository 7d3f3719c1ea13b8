"""
Run configuration.

Sources, highest priority first: explicit overrides (CLI flags), EDITLAB_*
environment variables (nested with `__`, a `.env` file is honored), the JSON
file given with --config, then the defaults below.
"""

from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Type

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic.fields import FieldInfo
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from models.editing.editor import ValueSearchConfig
from models.errors import ConfigInvalid, IoError
from models.transformer.config import BosMode, KeyTap, ModelConfig, PosSwap
from models.transformer.training import TrainingHyper

_CONFIG_DATA: ContextVar[Dict[str, Any]] = ContextVar("_CONFIG_DATA", default={})

MODE_ALIASES = {"rome": "rome_inconsistent", "rome_inconsistent": "rome_inconsistent", "c-rome": "c_rome", "c_rome": "c_rome"}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_mlp: Optional[int] = None
    vocab_size: int = 257
    max_seq: int = 64
    edited_layer: int = 0
    bos_mode: BosMode = "none"
    pos_swap: PosSwap = "off"
    key_tap: KeyTap = "post_activation"
    weights_path: Optional[Path] = None
    init_seed: int = 0

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(**self.model_dump(exclude={"weights_path", "init_seed"}))


class TrainingSection(_Section):
    corpus_path: Optional[Path] = None
    steps: int = Field(2000, ge=0)
    learning_rate: float = Field(3e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    seq_len: Optional[int] = Field(None, ge=1)
    seed: int = 0
    grad_clip: float = Field(1.0, ge=0)
    heldout_bytes: int = Field(4096, ge=0)
    log_every: int = Field(100, ge=1)

    def hyper(self, model: ModelConfig) -> TrainingHyper:
        return TrainingHyper(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seq_len=self.seq_len or model.capacity,
            seed=self.seed,
            grad_clip=self.grad_clip,
            log_every=self.log_every,
        )


class CovarianceSection(_Section):
    path: Optional[Path] = None
    max_samples: int = Field(100_000, ge=1)
    window: Optional[int] = Field(None, ge=1)
    ridge: Optional[float] = Field(None, gt=0)
    relative_ridge: float = Field(1e-4, gt=0)


class PrefixSection(_Section):
    count: int = Field(10, ge=1)
    min_length: int = Field(2, ge=1)
    max_length: int = Field(10, ge=1)
    source: Literal["model_generated", "random_bytes"] = "model_generated"
    temperature: float = Field(1.0, gt=0)
    seed: int = 0


class EditSection(_Section):
    mode: Literal["rome_inconsistent", "c_rome"] = "c_rome"
    denom_floor: float = Field(1e-4, ge=0)
    suite_path: Optional[Path] = None
    collapse_threshold: float = Field(0.02, gt=0)
    baseline_denominator: Optional[float] = Field(None, gt=0)

    @field_validator("mode", mode="before")
    @classmethod
    def _normalize_mode(cls, value: Any) -> Any:
        return MODE_ALIASES.get(value, value) if isinstance(value, str) else value


class EvaluationSection(_Section):
    prefix_test: bool = False
    ppl_probe_bytes: int = Field(1024, ge=2)
    seed: int = 0


class OutputSection(_Section):
    directory: Path = Path("runs")
    formats: Literal["json", "csv", "both"] = "both"


class LoggingSection(_Section):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    json_output: bool = Field(False, alias="json")

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class JsonFileSettingsSource(PydanticBaseSettingsSource):
    """Values from the --config JSON file, loaded by `load_run_config`."""

    def get_field_value(self, field: FieldInfo, field_name: str) -> Tuple[Any, str, bool]:
        return _CONFIG_DATA.get().get(field_name), field_name, False

    def __call__(self) -> Dict[str, Any]:
        return dict(_CONFIG_DATA.get())


class RunConfig(BaseSettings):
    model: ModelSection = Field(default_factory=ModelSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    covariance: CovarianceSection = Field(default_factory=CovarianceSection)
    prefixes: PrefixSection = Field(default_factory=PrefixSection)
    value_search: ValueSearchConfig = Field(default_factory=ValueSearchConfig)
    edit: EditSection = Field(default_factory=EditSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    output: OutputSection = Field(default_factory=OutputSection)
    logging: LoggingSection = Field(default_factory=LoggingSection)

    model_config = SettingsConfigDict(
        env_prefix="EDITLAB_",
        env_nested_delimiter="__",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return init_settings, env_settings, dotenv_settings, JsonFileSettingsSource(settings_cls)

    def with_seed(self, seed: int) -> "RunConfig":
        """Replace every seed of the run with `seed`."""
        return self.model_copy(
            update={
                "model": self.model.model_copy(update={"init_seed": seed}),
                "training": self.training.model_copy(update={"seed": seed}),
                "prefixes": self.prefixes.model_copy(update={"seed": seed}),
                "value_search": self.value_search.model_copy(update={"seed": seed}),
                "evaluation": self.evaluation.model_copy(update={"seed": seed}),
            }
        )

    def resolve_paths(self, base: Path) -> "RunConfig":
        def resolve(p: Optional[Path]) -> Optional[Path]:
            return p if p is None or p.is_absolute() else (base / p).resolve()

        return self.model_copy(
            update={
                "model": self.model.model_copy(update={"weights_path": resolve(self.model.weights_path)}),
                "training": self.training.model_copy(update={"corpus_path": resolve(self.training.corpus_path)}),
                "covariance": self.covariance.model_copy(update={"path": resolve(self.covariance.path)}),
                "edit": self.edit.model_copy(update={"suite_path": resolve(self.edit.suite_path)}),
                "output": self.output.model_copy(update={"directory": resolve(self.output.directory)}),
            }
        )

    def report_dict(self) -> Dict[str, Any]:
        """JSON-ready dump with paths as strings, embedded in every report."""
        return self.model_dump(mode="json", by_alias=True)


def _read_config_file(path: Path) -> Dict[str, Any]:
    try:
        data = orjson.loads(path.read_bytes())
    except OSError as e:
        raise IoError(f"could not read config {path}: {e}") from e
    except orjson.JSONDecodeError as e:
        raise ConfigInvalid(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigInvalid(f"config {path} must hold a JSON object")
    unknown = sorted(set(data) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigInvalid(f"config {path} has unknown sections: {', '.join(unknown)}")
    return data


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build the RunConfig for one command.

    Args:
        path: Optional JSON config file; relative paths inside it resolve against its directory
        overrides: Nested section values that take precedence over every other source

    Returns:
        Validated RunConfig
    """
    data = _read_config_file(Path(path)) if path is not None else {}
    token = _CONFIG_DATA.set(data)
    try:
        config = RunConfig(**(overrides or {}))
    except ValidationError as e:
        raise ConfigInvalid(str(e)) from e
    finally:
        _CONFIG_DATA.reset(token)
    base = Path(path).resolve().parent if path is not None else Path.cwd()
    return config.resolve_paths(base)
