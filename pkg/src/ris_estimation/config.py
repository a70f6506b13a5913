import dataclasses
import hashlib
import json
import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ris_estimation.errors import ConfigurationError

EXPERIMENT_KINDS = ("ungrouped", "single-region", "grouped-dml", "baseline-only")
PILOT_ALPHABETS = ("pm1", "unit_circle")
PRECODER_SCOPES = ("user", "sample")
LABEL_SOURCES = ("ls", "truth")
SERVER_OPTIMIZERS = ("adam", "sgd")
TRAINING_MODES = ("federated", "centralized", "per-user")
GATING_MODES = ("hard", "soft")
COVARIANCE_MODES = ("pooled", "per_region")
DATASET_FORMATS = ("npz", "csv")


@dataclass(frozen=True)
class ArraysConfig:
    bs: tuple[int, int] = (4, 4)
    ris: tuple[int, int] = (8, 8)
    spacing_over_wavelength: float = 0.5
    carrier_ghz: float = 28.0


@dataclass(frozen=True)
class GroupingConfig:
    group_size: int = 4


@dataclass(frozen=True)
class PilotsConfig:
    q: int = 32
    q_shape: tuple[int, int] = (8, 4)
    alphabet: str = "pm1"
    precoder_scope: str = "user"
    per_slot_precoder: bool = True
    normalize_by_sqrt_q: bool = True


@dataclass(frozen=True)
class ChannelConfig:
    bs_ris_paths: int = 3
    ris_user_paths: int = 3
    freeze_bs_ris: bool = False


@dataclass(frozen=True)
class RegionsConfig:
    edges_deg: tuple[float, ...] = (-90.0, -30.0, 30.0, 90.0)
    users_per_region: int = 3


@dataclass(frozen=True)
class DatasetConfig:
    samples_per_user: int = 20_000
    validation_fraction: float = 0.1
    test_size: int = 10_000
    train_snr_db: tuple[float, ...] = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    format: str = "npz"
    workers: int = 1


@dataclass(frozen=True)
class LabelsConfig:
    source: str = "ls"
    snr_db: float = 10.0


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "federated"
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_halving_epochs: int = 30
    server_optimizer: str = "adam"
    local_steps: int = 1
    gating: str = "hard"
    classifier_epochs: int = 10
    classifier_learning_rate: float = 1e-3
    validation_samples: int = 1024
    validate_every_rounds: int = 0
    checkpoint_every_epochs: int = 10
    workers: int = 1
    single_region: int = 1


@dataclass(frozen=True)
class EvaluationConfig:
    snr_db: tuple[float, ...] = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    baseline_q_grouped: int = 256
    baseline_q_ungrouped: int = 1024
    mmse_covariance: str = "pooled"
    covariance_loading: float = 1e-6
    soft_gating: bool = False
    pilot_sweep_q: tuple[int, ...] = (16, 32, 64, 128, 256)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 2024
    experiment: str = "grouped-dml"
    arrays: ArraysConfig = field(default_factory=ArraysConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    pilots: PilotsConfig = field(default_factory=PilotsConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    regions: RegionsConfig = field(default_factory=RegionsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    labels: LabelsConfig = field(default_factory=LabelsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    @property
    def n_bs(self) -> int:
        return self.arrays.bs[0] * self.arrays.bs[1]

    @property
    def n_ris(self) -> int:
        return self.arrays.ris[0] * self.arrays.ris[1]

    @property
    def grouped(self) -> bool:
        """The ungrouped regime always estimates the full N x M channel."""
        return self.experiment != "ungrouped" and self.grouping.group_size > 1

    @property
    def group_size(self) -> int:
        return self.grouping.group_size if self.grouped else 1

    @property
    def n_units(self) -> int:
        """Number of RIS control units (N' when grouped, N otherwise)."""
        return self.n_ris // self.group_size

    @property
    def channel_dim(self) -> int:
        """D: length of the estimated channel vector."""
        return self.n_units * self.n_bs

    @property
    def n_regions(self) -> int:
        return len(self.regions.edges_deg) - 1

    @property
    def baseline_q(self) -> int:
        if self.grouped:
            return self.evaluation.baseline_q_grouped
        return self.evaluation.baseline_q_ungrouped

    def users(self) -> list[tuple[int, int]]:
        """All (region, user) pairs, 1-based, in generation order."""
        return [
            (region, user)
            for region in range(1, self.n_regions + 1)
            for user in range(1, self.regions.users_per_region + 1)
        ]


_SECTIONS = {
    "arrays": ArraysConfig,
    "grouping": GroupingConfig,
    "pilots": PilotsConfig,
    "channel": ChannelConfig,
    "regions": RegionsConfig,
    "dataset": DatasetConfig,
    "labels": LabelsConfig,
    "training": TrainingConfig,
    "evaluation": EvaluationConfig,
}


def _coerce(section_cls: type, values: dict[str, Any], section: str):
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigurationError(
            f"Unknown keys in '{section}': {', '.join(sorted(unknown))}"
        )

    kwargs: dict[str, Any] = {}
    for name, value in values.items():
        default = getattr(section_cls(), name)
        # YAML lists become tuples so configs stay hashable and frozen
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"'{section}.{name}' must be a list")
            value = tuple(value)
        kwargs[name] = value
    return section_cls(**kwargs)


def config_from_dict(data: dict[str, Any] | None) -> ExperimentConfig:
    data = dict(data or {})
    top_level = {"seed", "experiment"}
    unknown = set(data) - top_level - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(
            f"Unknown top-level config keys: {', '.join(sorted(unknown))}"
        )

    kwargs: dict[str, Any] = {k: data[k] for k in top_level if k in data}
    for section, section_cls in _SECTIONS.items():
        values = data.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigurationError(f"Config section '{section}' must be a mapping")
        kwargs[section] = _coerce(section_cls, values, section)

    config = ExperimentConfig(**kwargs)
    validate_config(config)
    return config


def load_config(path: Path | None) -> ExperimentConfig:
    """
    Load an experiment configuration from a YAML file. Missing sections and keys
    take their defaults; a missing path yields the defaults entirely.
    """
    if path is None:
        return config_from_dict({})

    if not path.is_file():
        raise ConfigurationError(f"Config file does not exist: {path}")

    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Could not parse config file {path}: {e}")

    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must contain a mapping")

    return config_from_dict(data)


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    def plain(value):
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        return value

    return plain(dataclasses.asdict(config))


def dump_config(config: ExperimentConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = config_to_dict(config)
    payload["config_hash"] = config_hash(config)
    path.write_text(yaml.safe_dump(payload, sort_keys=False), encoding="utf-8")
    return path


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def with_overrides(config: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    """Return a validated copy with top-level fields replaced (None is skipped)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    updated = dataclasses.replace(config, **changes)
    validate_config(updated)
    return updated


def validate_config(config: ExperimentConfig) -> None:
    problems: list[str] = []

    if config.experiment not in EXPERIMENT_KINDS:
        problems.append(
            f"experiment must be one of {EXPERIMENT_KINDS}, got '{config.experiment}'"
        )

    for name, shape in (("arrays.bs", config.arrays.bs), ("arrays.ris", config.arrays.ris)):
        if len(shape) != 2 or any(int(s) < 1 for s in shape):
            problems.append(f"{name} must be two positive integers, got {shape}")
    if config.arrays.spacing_over_wavelength <= 0:
        problems.append("arrays.spacing_over_wavelength must be positive")

    g = config.grouping.group_size
    if g < 1 or config.n_ris % g != 0:
        problems.append(f"grouping.group_size={g} must divide N={config.n_ris}")

    pilots = config.pilots
    if pilots.q < 1:
        problems.append(f"pilots.q must be positive, got {pilots.q}")
    if len(pilots.q_shape) != 2 or pilots.q_shape[0] * pilots.q_shape[1] != pilots.q:
        problems.append(f"pilots.q_shape {pilots.q_shape} must multiply to Q={pilots.q}")
    if pilots.alphabet not in PILOT_ALPHABETS:
        problems.append(f"pilots.alphabet must be one of {PILOT_ALPHABETS}")
    if pilots.precoder_scope not in PRECODER_SCOPES:
        problems.append(f"pilots.precoder_scope must be one of {PRECODER_SCOPES}")

    if config.channel.bs_ris_paths < 1 or config.channel.ris_user_paths < 1:
        problems.append("channel path counts must be at least 1")

    edges = config.regions.edges_deg
    if len(edges) < 2:
        problems.append("regions.edges_deg needs at least two edges")
    elif any(b <= a for a, b in zip(edges, edges[1:])):
        problems.append(f"regions.edges_deg must be strictly increasing, got {edges}")
    elif not (math.isclose(edges[0], -90.0) and math.isclose(edges[-1], 90.0)):
        problems.append("regions.edges_deg must cover (-90, 90) degrees")
    if config.regions.users_per_region < 1:
        problems.append("regions.users_per_region must be at least 1")

    dataset = config.dataset
    if dataset.samples_per_user < 1:
        problems.append("dataset.samples_per_user must be at least 1")
    if not 0.0 <= dataset.validation_fraction < 1.0:
        problems.append("dataset.validation_fraction must be in [0, 1)")
    if dataset.test_size < 0:
        problems.append("dataset.test_size must be non-negative")
    if not dataset.train_snr_db:
        problems.append("dataset.train_snr_db must list at least one SNR")
    if dataset.format not in DATASET_FORMATS:
        problems.append(f"dataset.format must be one of {DATASET_FORMATS}")

    if config.labels.source not in LABEL_SOURCES:
        problems.append(f"labels.source must be one of {LABEL_SOURCES}")

    training = config.training
    if training.batch_size < 1 or training.epochs < 0:
        problems.append("training.batch_size must be positive and epochs non-negative")
    if training.mode not in TRAINING_MODES:
        problems.append(f"training.mode must be one of {TRAINING_MODES}")
    if training.mode == "per-user" and config.experiment == "single-region":
        problems.append("per-user training has no model for test users outside the training region")
    if training.server_optimizer not in SERVER_OPTIMIZERS:
        problems.append(f"training.server_optimizer must be one of {SERVER_OPTIMIZERS}")
    if training.gating not in GATING_MODES:
        problems.append(f"training.gating must be one of {GATING_MODES}")
    if training.local_steps < 1:
        problems.append("training.local_steps must be at least 1")
    if training.lr_halving_epochs < 1:
        problems.append("training.lr_halving_epochs must be at least 1")
    if training.validate_every_rounds < 0 or training.checkpoint_every_epochs < 0:
        problems.append("training.validate_every_rounds and checkpoint_every_epochs must be >= 0")
    if not 1 <= training.single_region <= max(len(edges) - 1, 1):
        problems.append("training.single_region must name an existing region")

    evaluation = config.evaluation
    if evaluation.mmse_covariance not in COVARIANCE_MODES:
        problems.append(f"evaluation.mmse_covariance must be one of {COVARIANCE_MODES}")
    if evaluation.covariance_loading < 0:
        problems.append("evaluation.covariance_loading must be non-negative")
    if evaluation.mmse_covariance == "per_region" and config.experiment == "single-region":
        problems.append("per_region MMSE covariances need training data from every region")
    if any(q < 1 for q in evaluation.pilot_sweep_q):
        problems.append("evaluation.pilot_sweep_q values must be positive")

    if problems:
        raise ConfigurationError("Invalid configuration:\n  - " + "\n  - ".join(problems))
