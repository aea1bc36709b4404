"""
Configuration Loader for Experiments

This module handles loading, layering, and validating experiment configuration:
built-in defaults, an optional preset from config/presets/, an optional YAML or
JSON file, and command-line overrides, in that order.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml  # pyright: ignore[reportMissingModuleSource]

from src.corruptions import CORRUPTION_KINDS, NOISE_KINDS

METHODS = ("Standard", "DiGN", "DiGN_woCR", "RSE", "AT", "TRADES")
NORMS = ("2", "inf")
MODEL_NAMES = ("mlp_64_32", "tiny_cnn", "linear")

PRESET_DIR = Path(__file__).parent.parent / "config" / "presets"
DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "config" / "experiment.yaml"

# File keys that are Python keywords
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


class ConfigurationError(Exception):
    """Custom exception for configuration-related errors."""

    pass


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


@dataclass(frozen=True)
class AttackConfig:
    """
    Projected-gradient attack settings.

    Attributes:
        epsilon: Radius of the norm ball
        steps: Number of ascent steps k
        step_size: Step length alpha; None means 2.5 * epsilon / steps
        norm: '2' or 'inf'
        random_start: Start PGD from a uniform point in the ball instead of 0
    """

    epsilon: float = 8.0 / 255.0
    steps: int = 7
    step_size: Optional[float] = None
    norm: str = "inf"
    random_start: bool = False

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        if self.steps == 0:
            return 0.0
        return 2.5 * self.epsilon / self.steps

    def validate(self) -> None:
        _check(_is_number(self.epsilon) and self.epsilon >= 0, "attack.epsilon must be >= 0")
        _check(_is_int(self.steps) and self.steps >= 0, "attack.steps must be an integer >= 0")
        _check(self.norm in NORMS, f"attack.norm must be one of {list(NORMS)}, got '{self.norm}'")
        if self.step_size is not None:
            _check(_is_number(self.step_size), "attack.step_size must be a number")
        if self.steps > 0 and self.epsilon > 0:
            _check(self.alpha > 0, "attack.step_size must be > 0 when steps > 0")


@dataclass(frozen=True)
class TrainConfig:
    """
    Training procedure settings shared by every method.

    Fields irrelevant to the chosen method are ignored but still
    range-checked.
    """

    method: str = "Standard"
    epochs: int = 60
    batch_size: int = 64
    lr_init: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 25
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 0.2
    sigma_max: float = 0.2
    n_samples: int = 3
    rse_sigma: float = 0.1
    rse_ensemble_n: int = 10
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: On the first out-of-range field
        """
        _check(self.method in METHODS, f"train.method must be one of {list(METHODS)}, got '{self.method}'")
        _check(_is_int(self.epochs) and self.epochs >= 0, "train.epochs must be an integer >= 0")
        _check(_is_int(self.batch_size) and self.batch_size >= 1, "train.batch_size must be an integer >= 1")
        _check(_is_number(self.lr_init) and self.lr_init >= 0, "train.lr_init must be >= 0")
        _check(_is_number(self.lr_decay_factor) and self.lr_decay_factor > 0, "train.lr_decay_factor must be > 0")
        _check(_is_int(self.lr_decay_every) and self.lr_decay_every >= 1, "train.lr_decay_every must be an integer >= 1")
        _check(_is_number(self.momentum) and 0 <= self.momentum < 1, "train.momentum must be in [0, 1)")
        _check(_is_number(self.weight_decay) and self.weight_decay >= 0, "train.weight_decay must be >= 0")
        _check(_is_number(self.lam) and self.lam >= 0, "train.lambda must be >= 0")
        _check(_is_number(self.sigma_max) and self.sigma_max >= 0, "train.sigma_max must be >= 0")
        _check(_is_int(self.n_samples) and self.n_samples >= 1, "train.n_samples must be an integer >= 1")
        _check(_is_number(self.rse_sigma) and self.rse_sigma >= 0, "train.rse_sigma must be >= 0")
        _check(_is_int(self.rse_ensemble_n) and self.rse_ensemble_n >= 1, "train.rse_ensemble_n must be an integer >= 1")
        _check(_is_int(self.seed), "train.seed must be an integer")
        self.attack.validate()


@dataclass(frozen=True)
class DatasetConfig:
    """
    Where the data comes from.

    Attributes:
        kind: 'synth' for the generated texture benchmark, 'idx' for IDX files
        classes: K for the synthetic set
        height: Image height of the synthetic set
        width: Image width of the synthetic set
        train_per_class: Synthetic training samples per class
        val_per_class: Synthetic validation samples per class
        test_per_class: Synthetic test samples per class
        jitter: Per-pixel uniform jitter amplitude
        seed: Seed of the synthetic generator
        train_images: IDX image file for training (kind 'idx')
        train_labels: IDX label file for training
        test_images: IDX image file for testing
        test_labels: IDX label file for testing
        val_fraction: Fraction of IDX training data held out for validation
        stratify: Stratify the validation split by class
        cache_dir: When set, generated data is cached there as IDX files
    """

    kind: str = "synth"
    classes: int = 4
    height: int = 16
    width: int = 16
    train_per_class: int = 500
    val_per_class: int = 100
    test_per_class: int = 250
    jitter: float = 0.08
    seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    val_fraction: float = 0.1
    stratify: bool = True
    cache_dir: Optional[str] = None

    def validate(self) -> None:
        _check(self.kind in ("synth", "idx"), f"dataset.kind must be 'synth' or 'idx', got '{self.kind}'")
        if self.kind == "synth":
            _check(_is_int(self.classes) and self.classes >= 2, "dataset.classes must be an integer >= 2")
            _check(_is_int(self.height) and self.height >= 1, "dataset.height must be >= 1")
            _check(_is_int(self.width) and self.width >= 1, "dataset.width must be >= 1")
            for name in ("train_per_class", "val_per_class", "test_per_class"):
                value = getattr(self, name)
                _check(_is_int(value) and value >= 1, f"dataset.{name} must be an integer >= 1")
            _check(_is_number(self.jitter) and self.jitter >= 0, "dataset.jitter must be >= 0")
            _check(_is_int(self.seed), "dataset.seed must be an integer")
        else:
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                _check(
                    isinstance(getattr(self, name), str),
                    f"dataset.{name} is required when dataset.kind is 'idx'",
                )
            _check(
                _is_number(self.val_fraction) and 0 < self.val_fraction < 1,
                "dataset.val_fraction must be in (0, 1)",
            )


@dataclass(frozen=True)
class CorruptionConfig:
    """
    Evaluation corruptions.

    Attributes:
        kinds: Corruption kinds evaluated (rows of the accuracy matrix)
        severities: Severity levels evaluated (columns)
        noise_kinds: Rows pooled into mCA-N and RMSE-N
        tables: Optional per-kind overrides of the five severity parameters
    """

    kinds: Tuple[str, ...] = CORRUPTION_KINDS
    severities: Tuple[int, ...] = (1, 2, 3, 4, 5)
    noise_kinds: Tuple[str, ...] = NOISE_KINDS
    tables: Dict[str, Tuple[float, ...]] = field(default_factory=dict)

    def validate(self) -> None:
        for kind in self.kinds:
            _check(kind in CORRUPTION_KINDS, f"Unknown corruption kind '{kind}'")
        for kind in self.noise_kinds:
            _check(kind in CORRUPTION_KINDS, f"Unknown corruption kind '{kind}' in noise_kinds")
        _check(len(set(self.kinds)) == len(self.kinds), "corruption.kinds contains duplicates")
        for severity in self.severities:
            _check(_is_int(severity) and 1 <= severity <= 5, f"Severity must be in 1..5, got {severity}")
        for kind, table in self.tables.items():
            _check(kind in CORRUPTION_KINDS, f"Unknown corruption kind '{kind}' in tables")
            _check(
                len(table) == 5 and all(_is_number(v) and v >= 0 for v in table),
                f"corruption.tables.{kind} must list five non-negative numbers",
            )


@dataclass(frozen=True)
class MetricsConfig:
    """Calibration binning."""

    n_bins: int = 15

    def validate(self) -> None:
        _check(_is_int(self.n_bins) and self.n_bins >= 1, "metrics.n_bins must be an integer >= 1")


@dataclass(frozen=True)
class VerifyConfig:
    """
    Tolerances and sample sizes of the theory checks.

    Attributes:
        n_inputs: Test inputs examined per check
        sigma: Noise scale of the Gaussian-expectation check (and sigma_max
            of the diverse-noise check)
        mc_samples: Monte-Carlo draws per input
        ratio_low: Lower bound on the Monte-Carlo / analytic ratio
        ratio_high: Upper bound on the Monte-Carlo / analytic ratio
        min_trace: Expectation checks use only inputs with Tr(G) at least this
        hessian_tol: Max entrywise gap allowed between Hessian and FIM
        gradnorm_tol: Max gap allowed in the gradient-norm identity
        perturbations: Random perturbations per input in the bound check
        delta_max: Largest perturbation norm in the bound check
        slope_low: Lower bound of the fitted remainder slope
        slope_high: Upper bound of the fitted remainder slope
        hutchinson_vectors: Random sign vectors in the trace cross-check
        seed: Seed of all verification draws
    """

    n_inputs: int = 5
    sigma: float = 1e-2
    mc_samples: int = 20000
    ratio_low: float = 0.9
    ratio_high: float = 1.1
    min_trace: float = 1e-3
    hessian_tol: float = 1e-8
    gradnorm_tol: float = 1e-10
    perturbations: int = 10000
    delta_max: float = 1e-2
    slope_low: float = 2.8
    slope_high: float = 3.2
    hutchinson_vectors: int = 2000
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_inputs", "mc_samples", "perturbations", "hutchinson_vectors"):
            value = getattr(self, name)
            _check(_is_int(value) and value >= 1, f"verify.{name} must be an integer >= 1")
        for name in ("sigma", "min_trace", "hessian_tol", "gradnorm_tol", "delta_max"):
            value = getattr(self, name)
            _check(_is_number(value) and value >= 0, f"verify.{name} must be >= 0")
        _check(self.ratio_low <= self.ratio_high, "verify.ratio_low must be <= ratio_high")
        _check(self.slope_low <= self.slope_high, "verify.slope_low must be <= slope_high")


@dataclass(frozen=True)
class SweepConfig:
    """Hyperparameter grid for the sweep command."""

    lambdas: Tuple[float, ...] = (0.05, 0.2, 0.4)
    sigma_maxes: Tuple[float, ...] = (0.2,)
    n_samples: Tuple[int, ...] = (3,)

    def validate(self) -> None:
        _check(
            len(self.lambdas) > 0 and len(self.sigma_maxes) > 0 and len(self.n_samples) > 0,
            "sweep grid must not be empty",
        )
        _check(all(_is_number(v) and v >= 0 for v in self.lambdas), "sweep.lambdas must be >= 0")
        _check(all(_is_number(v) and v >= 0 for v in self.sigma_maxes), "sweep.sigma_maxes must be >= 0")
        _check(all(_is_int(v) and v >= 1 for v in self.n_samples), "sweep.n_samples must be integers >= 1")

    def grid(self) -> List[Tuple[float, float, int]]:
        """Sorted (lambda, sigma_max, n_samples) points."""
        return sorted(
            {(float(l), float(s), int(n)) for l in self.lambdas for s in self.sigma_maxes for n in self.n_samples}
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment configuration."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: str = "mlp_64_32"
    train: TrainConfig = field(default_factory=TrainConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    methods: Tuple[str, ...] = ("Standard", "DiGN", "DiGN_woCR")
    seeds: Tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"

    def validate(self) -> None:
        """Validate every nested block."""
        self.dataset.validate()
        _check(self.model in MODEL_NAMES, f"model must be one of {list(MODEL_NAMES)}, got '{self.model}'")
        self.train.validate()
        self.corruption.validate()
        self.metrics.validate()
        self.verify.validate()
        self.sweep.validate()
        _check(len(self.methods) > 0, "methods must not be empty")
        for method in self.methods:
            _check(method in METHODS, f"Unknown method '{method}' in methods")
        _check(len(self.seeds) > 0, "seeds must not be empty")
        _check(all(_is_int(s) for s in self.seeds), "seeds must be integers")
        _check(len(set(self.seeds)) == len(self.seeds), "seeds must be distinct")
        _check(isinstance(self.output_dir, str) and self.output_dir != "", "output_dir must be a path")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    def with_train(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))


def _to_plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {
            _FIELD_TO_KEY.get(f.name, f.name): _to_plain(getattr(value, f.name))
            for f in dataclasses.fields(value)
        }
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    return value


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical sorted-key JSON of a resolved config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def deep_merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    """Merge ``update`` into ``base`` key by key; nested mappings merge recursively."""
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigLoader:
    """
    Loads, layers, and validates experiment configuration.

    Layers apply in order: built-in defaults, preset, config file,
    overrides. Unknown keys at any level are rejected before any work starts.
    """

    def __init__(
        self,
        config_path: Optional[Path] = None,
        preset: Optional[str] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ):
        """
        Initialize the config loader.

        Args:
            config_path: YAML or JSON file. If None, only defaults and preset apply.
            preset: Preset name under config/presets/ (hyphens allowed)
            overrides: Nested mapping applied last (command-line flags)
        """
        self.config_path = Path(config_path) if config_path else None
        self.preset = preset
        self.overrides = dict(overrides or {})
        self._raw_config: Optional[Dict[str, Any]] = None
        self._config: Optional[ExperimentConfig] = None

    def load(self) -> "ConfigLoader":
        """
        Resolve every layer and validate the result.

        Returns:
            self for method chaining

        Raises:
            ConfigurationError: If loading or validation fails
        """
        raw = _to_plain(ExperimentConfig())
        if self.preset:
            raw = deep_merge(raw, self._strip_metadata(load_preset(self.preset)))
        if self.config_path is not None:
            raw = deep_merge(raw, self._strip_metadata(read_config_file(self.config_path)))
        raw = deep_merge(raw, self.overrides)

        self._raw_config = raw
        self._config = self._parse(raw)
        self._config.validate()
        return self

    @staticmethod
    def _strip_metadata(data: Dict[str, Any]) -> Dict[str, Any]:
        return {k: v for k, v in data.items() if k != "metadata"}

    def _parse(self, raw: Mapping[str, Any]) -> ExperimentConfig:
        _check(isinstance(raw, Mapping), "Configuration must be a dictionary")
        blocks = {
            "dataset": DatasetConfig,
            "corruption": CorruptionConfig,
            "metrics": MetricsConfig,
            "verify": VerifyConfig,
            "sweep": SweepConfig,
        }
        values = _fields_from(ExperimentConfig, raw, "config")
        for name, cls in blocks.items():
            values[name] = _build(cls, values[name], name)

        train_raw = values["train"]
        _check(isinstance(train_raw, Mapping), "'train' must be a dictionary")
        train_values = _fields_from(TrainConfig, train_raw, "train")
        train_values["attack"] = _build(AttackConfig, train_values["attack"], "train.attack")
        values["train"] = TrainConfig(**train_values)
        return ExperimentConfig(**values)

    @property
    def config(self) -> ExperimentConfig:
        if self._config is None:
            raise ConfigurationError("Configuration not loaded. Call load() first.")
        return self._config

    def get_raw_config(self) -> Dict[str, Any]:
        if self._raw_config is None:
            raise ConfigurationError("Configuration not loaded. Call load() first.")
        return dict(self._raw_config)

    def __repr__(self) -> str:
        if self._config is None:
            return f"ConfigLoader(path={self.config_path}, preset={self.preset}, loaded=False)"
        return (
            f"ConfigLoader(path={self.config_path}, preset={self.preset}, "
            f"hash={config_hash(self._config)[:12]}, loaded=True)"
        )


def _fields_from(cls: type, data: Mapping[str, Any], where: str) -> Dict[str, Any]:
    """Map file keys to dataclass field values, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}
    for key, value in data.items():
        name = _KEY_TO_FIELD.get(key, key)
        if name not in known:
            allowed = sorted(_FIELD_TO_KEY.get(n, n) for n in known)
            raise ConfigurationError(f"Unknown key '{key}' in {where}. Allowed: {allowed}")
        values[name] = value
    for f in dataclasses.fields(cls):
        if f.name not in values:
            if f.default is not dataclasses.MISSING:
                values[f.name] = f.default
            else:
                values[f.name] = _to_plain(f.default_factory())
    return values


def _build(cls: type, data: Any, where: str) -> Any:
    _check(isinstance(data, Mapping), f"'{where}' must be a dictionary")
    values = _fields_from(cls, data, where)
    for f in dataclasses.fields(cls):
        value = values[f.name]
        if isinstance(value, list):
            values[f.name] = tuple(value)
        elif isinstance(value, Mapping):
            values[f.name] = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    if cls is AttackConfig and values["norm"] is not None:
        norm = values["norm"]
        if isinstance(norm, float) and math.isinf(norm):
            norm = "inf"
        values["norm"] = str(norm)
    return cls(**values)


def read_config_file(path: Path) -> Dict[str, Any]:
    """
    Read a YAML or JSON configuration file.

    JSON documents go through the YAML safe loader as well.

    Raises:
        ConfigurationError: On a missing file or invalid syntax
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"Configuration file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Invalid YAML/JSON syntax in {path}: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Configuration in {path} must be a dictionary")
    return data


def preset_path(name: str) -> Path:
    return PRESET_DIR / f"{name.replace('-', '_')}.yaml"


def load_preset(name: str) -> Dict[str, Any]:
    """Read a preset by name; 'paper-defaults' resolves to paper_defaults.yaml."""
    path = preset_path(name)
    if not path.exists():
        raise ConfigurationError(
            f"Unknown preset '{name}'. Available: {sorted(list_presets())}"
        )
    return read_config_file(path)


def list_presets() -> Dict[str, str]:
    """Map preset names to their metadata descriptions."""
    presets = {}
    for path in sorted(PRESET_DIR.glob("*.yaml")):
        data = read_config_file(path)
        metadata = data.get("metadata") or {}
        presets[path.stem] = metadata.get("description", "")
    return presets


def load_config(
    config_path: Optional[Path] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ConfigLoader:
    """
    Convenience function to load configuration.

    Example:
        >>> loader = load_config(preset="desk-quick")
        >>> loader.config.train.epochs
    """
    return ConfigLoader(config_path, preset, overrides).load()
