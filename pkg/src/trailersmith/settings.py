"""Settings management using Pydantic Settings."""

import logging
import zlib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import toml
from pydantic import BaseModel, Field
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from trailersmith.errors import ConfigError

logger = logging.getLogger("trailersmith.settings")

DEFAULT_CONFIG_NAME = "trailersmith.toml"


class SegmenterSettings(BaseModel):
    """Shot detector and clip settings."""
    bins: int = Field(default=16, ge=2)
    cut_threshold: float = Field(default=0.4, gt=0)
    black_threshold: float = Field(default=20 / 255, gt=0)
    min_shot_length: int = Field(default=6, ge=1)
    distance: Literal["l1", "bhattacharyya"] = "l1"
    feature_width: int = Field(default=256, ge=2)


class SnippetSettings(BaseModel):
    clips_per_snippet: int = Field(default=30, ge=1)


class ModelSettings(BaseModel):
    """Aggregator shape; b comes from the feature files."""
    aggregator: Literal["transformer", "gru", "conv"] = "transformer"
    d: int = Field(default=128, ge=1)
    blocks: int = Field(default=4, ge=1)
    heads: int = Field(default=4, ge=1)
    ffn_multiplier: int = Field(default=4, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    positional_encoding: Literal["sinusoidal", "none"] = "sinusoidal"
    gru_hidden: int = Field(default=115, ge=1)
    conv_filters: int = Field(default=128, ge=1)
    conv_width: int = Field(default=3, ge=1)


class TrainSettings(BaseModel):
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    plateau_patience: int = Field(default=20, ge=1)
    lr_factor: float = Field(default=10.0, gt=1)
    plateau_min_delta: float = Field(default=1e-5, ge=0)
    early_stop_patience: int = Field(default=30, ge=1)


class ExperimentSettings(BaseModel):
    seed: int = 0
    strategy: str = "Shot-24"
    fps: int = Field(default=24, ge=1)
    streams: Literal["single", "fusion"] = "single"
    folds: List[int] = Field(default_factory=lambda: [1, 2, 3])
    workers: int = Field(default=1, ge=1)


class SynthVideoSettings(BaseModel):
    n_videos: int = Field(default=20, ge=1)
    shots_min: int = Field(default=3, ge=1)
    shots_max: int = Field(default=8, ge=1)
    shot_min_length: int = Field(default=12, ge=1)
    shot_max_length: int = Field(default=60, ge=1)
    transitions: List[Literal["cut", "fade", "black"]] = Field(default_factory=lambda: ["cut", "fade", "black"])
    transition_length: int = Field(default=6, ge=1)
    height: int = Field(default=16, ge=1)
    width: int = Field(default=16, ge=1)
    fps: int = Field(default=24, ge=1)


class SynthFeatureSettings(BaseModel):
    n_trailers: int = Field(default=600, ge=1)
    b: int = Field(default=256, ge=2)
    clips_min: int = Field(default=20, ge=1)
    clips_max: int = Field(default=60, ge=1)
    snr: float = Field(default=2.0, gt=0)
    signal_fraction: float = Field(default=0.5, gt=0, le=1)
    shuffle_labels: bool = False
    two_streams: bool = False
    strategy: Optional[str] = None


class SynthSettings(BaseModel):
    video: SynthVideoSettings = Field(default_factory=SynthVideoSettings)
    features: SynthFeatureSettings = Field(default_factory=SynthFeatureSettings)


class TomlConfigSettingsSource(PydanticBaseSettingsSource):
    """
    A settings source that loads top-level sections from a TOML file.
    """

    def __init__(self, settings_cls: type[BaseSettings], config_path: Optional[Path] = None):
        super().__init__(settings_cls)
        self.config_path = config_path
        self._data: Optional[Dict[str, Any]] = None

    def _load(self) -> Dict[str, Any]:
        if self._data is None:
            try:
                self._data = toml.load(self.config_path) if self.config_path else {}
            except (OSError, toml.TomlDecodeError) as e:
                raise ConfigError(f"Cannot read config file {self.config_path}: {e}",
                                  {"path": str(self.config_path)}) from e
        return self._data

    def get_field_value(self, field: Any, field_name: str) -> tuple[Any, str, bool]:
        section = self._load().get(field_name)
        if isinstance(section, dict):
            return section, field_name, True
        return None, field_name, False

    def __call__(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {}
        unknown = set(self._load()) - set(self.settings_cls.model_fields)
        if unknown:
            logger.warning(f"Ignoring unknown config sections: {', '.join(sorted(unknown))}")
        for field_name, field in self.settings_cls.model_fields.items():
            field_value, field_key, _ = self.get_field_value(field, field_name)
            if field_value is not None:
                d[field_key] = field_value
        return d


class TrailersmithSettings(BaseSettings):
    """Main settings class for trailersmith."""

    segmenter: SegmenterSettings = Field(default_factory=SegmenterSettings)
    snippets: SnippetSettings = Field(default_factory=SnippetSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings)
    synth: SynthSettings = Field(default_factory=SynthSettings)

    model_config = SettingsConfigDict(
        env_prefix="TRAILERSMITH_",
        env_nested_delimiter="__",
        extra="forbid",
        protected_namespaces=(),
    )


def _nest(options: Dict[str, Any]) -> Dict[str, Any]:
    """Turn dotted keys (`train.epochs`) into nested dicts, dropping unset (None) values."""
    nested: Dict[str, Any] = {}
    for key, value in options.items():
        if value is None:
            continue
        parts = key.split(".")
        current = nested
        for part in parts[:-1]:
            current = current.setdefault(part, {})
        current[parts[-1]] = value
    return nested


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_settings(config_path: Optional[Union[str, Path]] = None,
                  cli_options: Optional[Dict[str, Any]] = None) -> TrailersmithSettings:
    """
    Load settings with the precedence CLI options > config file > defaults.
    """
    file_data: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}", {"path": str(path)})
        file_data = TomlConfigSettingsSource(TrailersmithSettings, path)()
    merged = _deep_merge(file_data, _nest(cli_options or {}))
    try:
        return TrailersmithSettings(**merged)
    except ValueError as e:
        raise ConfigError(f"Invalid settings: {e}") from e


def create_default_config(config_path: Union[str, Path]) -> Path:
    """Write a TOML file holding every default setting."""
    config_path = Path(config_path)
    config_path.parent.mkdir(parents=True, exist_ok=True)
    settings = TrailersmithSettings()
    with open(config_path, "w") as f:
        f.write("# trailersmith configuration; command-line flags override these values\n\n")
        toml.dump(settings.model_dump(mode="json"), f)
    logger.info(f"Created default config at {config_path}")
    return config_path


def derive_seed(seed: int, *labels: Union[str, int]) -> int:
    """
    Expand the top-level seed into an independent 32-bit seed per component.

    Labels are hashed with CRC-32 (text labels as UTF-8, integers via their decimal form)
    and fed with the seed into numpy's SeedSequence; the first generated word is returned.
    """
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(label).encode("utf-8")) for label in labels]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def component_rng(seed: int, *labels: Union[str, int]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
