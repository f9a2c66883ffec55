"""Experiment configuration: a sectioned ``key = value`` text file.

Unknown sections and keys are errors. Seeds inside the training and split
sections are not configurable; each run's seed from ``[experiment] seeds``
takes their place.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .encoding import CANONICAL_AMINO_ACIDS, GAP_SYMBOL, UNKNOWN_SYMBOL
from .errors import ConfigError
from .federation import CLIENT_INIT_MODES, AggregationStrategy
from .nn import DEFAULT_HIDDEN_WIDTHS, TrainConfig
from .partitioning import POISON_MODES, SplitPlan
from .synthetic import SyntheticSpec

DATA_SOURCES = ("synthetic", "fasta")
ALPHABET_MODES = ("fixed", "derived")
ALL_STRATEGIES = tuple(s.value for s in AggregationStrategy)


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    manifest: str = ""
    alphabet_mode: str = "fixed"
    alphabet: str = CANONICAL_AMINO_ACIDS + UNKNOWN_SYMBOL + GAP_SYMBOL

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}")
        if self.alphabet_mode not in ALPHABET_MODES:
            raise ConfigError(f"data.alphabet_mode must be one of {ALPHABET_MODES}")
        if self.source == "fasta" and not self.manifest:
            raise ConfigError("data.manifest is required when data.source = fasta")


@dataclass(frozen=True)
class RoundsSection:
    n_rounds: int = 1
    val_split: float = 0.1
    global_val_split: float = 0.0
    dwfl_scale_first: bool = True
    poisoned_clients: tuple = ()
    poison_mode: str = "label_shuffle"
    hidden_widths: tuple = DEFAULT_HIDDEN_WIDTHS
    client_init: str = "shared"

    def __post_init__(self):
        if self.client_init not in CLIENT_INIT_MODES:
            raise ConfigError(f"rounds.client_init must be one of {CLIENT_INIT_MODES}")
        if self.n_rounds < 1:
            raise ConfigError("rounds.n_rounds must be >= 1")
        if not 0.0 <= self.val_split < 1.0 or not 0.0 <= self.global_val_split < 1.0:
            raise ConfigError("validation splits must lie in [0, 1)")
        if self.poison_mode not in POISON_MODES:
            raise ConfigError(f"rounds.poison_mode must be one of {POISON_MODES}")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigError("rounds.hidden_widths must be positive integers")


@dataclass(frozen=True)
class ExperimentSection:
    strategies: tuple = ALL_STRATEGIES
    seeds: tuple = (1, 2, 3, 4, 5)
    output_dir: str = "dwfl-out"

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("experiment.strategies must name at least one strategy")
        for s in self.strategies:
            AggregationStrategy.parse(s)
        if not self.seeds:
            raise ConfigError("experiment.seeds must not be empty")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    split: SplitPlan = field(default_factory=SplitPlan)
    rounds: RoundsSection = field(default_factory=RoundsSection)
    client_train: TrainConfig = field(default_factory=TrainConfig)
    global_train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self, base_dir=None) -> None:
        """Check that referenced paths exist."""
        if self.data.source == "fasta":
            manifest = Path(self.data.manifest)
            if base_dir is not None and not manifest.is_absolute():
                manifest = Path(base_dir) / manifest
            if not manifest.is_file():
                raise ConfigError(f"manifest not found: {manifest}")
        if any(c >= self.split.n_clients or c < 0 for c in self.rounds.poisoned_clients):
            raise ConfigError("rounds.poisoned_clients refers to a client that does not exist")

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


SECTIONS = ("data", "synthetic", "split", "rounds", "client_train", "global_train", "experiment")
# run seeds override these; they are never read from or written to the file
_SEED_FIELDS = {"split": ("seed",), "client_train": ("seed",), "global_train": ("seed",)}
_TUPLE_ITEM = {
    ("rounds", "poisoned_clients"): int,
    ("rounds", "hidden_widths"): int,
    ("experiment", "strategies"): str,
    ("experiment", "seeds"): int,
}


def _section_fields(name: str, section_obj):
    skip = _SEED_FIELDS.get(name, ())
    return [f for f in dataclasses.fields(section_obj) if f.name not in skip]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            item = _TUPLE_ITEM[(section, key)]
            return tuple(item(p.strip()) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    defaults = ExperimentConfig()
    built = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
    for name in SECTIONS:
        default_obj = getattr(defaults, name)
        allowed = {f.name: f for f in _section_fields(name, default_obj)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in allowed:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                values[key] = _coerce(name, key, raw, getattr(default_obj, key))
        try:
            built[name] = dataclasses.replace(default_obj, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    return ExperimentConfig(**built)


def serialize_config(config: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        obj = getattr(config, name)
        lines.append(f"[{name}]")
        for f in _section_fields(name, obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    """Read a config file; a relative manifest path resolves against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    config = parse_config(path.read_text())
    manifest = config.data.manifest
    if manifest and not Path(manifest).is_absolute():
        config = config.replace(data=dataclasses.replace(config.data, manifest=str(path.parent / manifest)))
    return config
