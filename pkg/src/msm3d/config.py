"""Strict run configuration: namespaced keys from a YAML file plus command-line overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError, ContractError
from .evaluation import InstanceConfig, ProbeConfig
from .hunet import HUNetConfig
from .train import TrainConfig
from .views import AugConfig, ViewConfig

NAMESPACES = ("aug", "crop", "mask", "model", "train", "probe")


@dataclass
class ProbeSettings:
    """Everything the evaluation commands need beyond the linear-probe optimizer."""
    epochs: int = 40
    lr: float = 0.01
    weight_decay: float = 0.01
    warmup_epochs: int = 2
    batch_points: int = 4096
    max_train_points: int = 60000
    standardize: bool = True
    metric: str = "L2"
    unit_norm: bool = False
    superpoint_cell: float = 0.25
    radius: float = 0.15
    min_points: int = 10
    offset_hidden: int = 64
    offset_epochs: int = 30
    weights: str = "student"

    def probe_config(self, seed: int) -> ProbeConfig:
        return ProbeConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                           warmup_epochs=self.warmup_epochs, batch_points=self.batch_points,
                           max_train_points=self.max_train_points, standardize=self.standardize,
                           seed=seed)

    def instance_config(self, seed: int) -> InstanceConfig:
        return InstanceConfig(epochs=self.offset_epochs, lr=self.lr, weight_decay=self.weight_decay,
                              hidden=self.offset_hidden, batch_points=self.batch_points,
                              max_train_points=self.max_train_points, radius=self.radius,
                              min_points=self.min_points, seed=seed)


def _defaults() -> dict[str, dict]:
    model = HUNetConfig().to_dict()
    model["voxel_size"] = ViewConfig().voxel_size
    train = TrainConfig().to_dict()
    mask = {"ratio": train.pop("mask_ratio"), "topdown": train.pop("topdown_mask")}
    return {
        "aug": asdict(AugConfig()),
        "crop": {"max_points": ViewConfig().crop_max_points},
        "mask": mask,
        "model": model,
        "train": train,
        "probe": asdict(ProbeSettings()),
    }


DEFAULTS = _defaults()


def _coerce(key: str, value, default):
    """Check ``value`` against the type of the default it replaces."""
    if default is None:
        if value is None:
            return None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [float(v) for v in value]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-3 as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default:
            return [_coerce(f"{key}[{i}]", v, default[0]) for i, v in enumerate(value)]
        return list(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def flatten(tree: dict, prefix: str = "") -> dict[str, object]:
    """Nested mappings become dotted keys; dotted keys already present are kept."""
    flat = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten(v, name + "."))
        else:
            flat[name] = v
    return flat


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def set(self, key: str, value) -> None:
        ns, _, name = key.partition(".")
        if ns not in NAMESPACES or not name:
            raise ConfigError(f"unknown config key {key!r} (namespaces: {', '.join(NAMESPACES)})")
        section = self.values[ns]
        if name not in section:
            raise ConfigError(f"unknown config key {key!r}")
        section[name] = _coerce(key, value, DEFAULTS[ns][name])

    def update(self, flat: dict) -> None:
        for key, value in flat.items():
            self.set(key, value)

    def get(self, key: str):
        ns, _, name = key.partition(".")
        try:
            return self.values[ns][name]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def to_flat(self) -> dict[str, object]:
        return flatten(self.values)

    # typed views -------------------------------------------------------

    def model(self) -> HUNetConfig:
        d = dict(self.values["model"])
        d.pop("voxel_size")
        return _build(HUNetConfig, d, "model")

    def voxel_size(self) -> float:
        v = self.values["model"]["voxel_size"]
        if v <= 0:
            raise ConfigError(f"model.voxel_size must be positive, got {v}")
        return v

    def train(self) -> TrainConfig:
        d = dict(self.values["train"])
        d["mask_ratio"] = self.values["mask"]["ratio"]
        d["topdown_mask"] = self.values["mask"]["topdown"]
        return _build(TrainConfig, d, "train")

    def views(self) -> ViewConfig:
        aug = _build(AugConfig, dict(self.values["aug"]), "aug")
        if not 0.8 <= aug.scale_min <= aug.scale_max <= 1.2:
            raise ConfigError("aug.scale_min/scale_max must satisfy 0.8 <= min <= max <= 1.2")
        if not 0.0 <= aug.flip_p <= 1.0:
            raise ConfigError("aug.flip_p must be a probability")
        if self.values["crop"]["max_points"] < 1:
            raise ConfigError("crop.max_points must be >= 1")
        return ViewConfig(aug=aug, voxel_size=self.voxel_size(), levels=self.values["model"]["levels"],
                          crop_max_points=self.values["crop"]["max_points"],
                          mask_ratio=self.values["mask"]["ratio"])

    def probe(self) -> ProbeSettings:
        p = _build(ProbeSettings, dict(self.values["probe"]), "probe")
        if p.metric not in ("L1", "L2", "cosine"):
            raise ConfigError(f"probe.metric must be L1, L2 or cosine, got {p.metric!r}")
        if p.weights not in ("teacher", "student"):
            raise ConfigError(f"probe.weights must be teacher or student, got {p.weights!r}")
        return p


def _build(cls, d: dict, ns: str):
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown config key {ns}.{sorted(extra)[0]}")
    try:
        return cls(**d)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {ns} settings: {exc}") from None


def parse_override_value(text: str):
    """Command-line override values are read as YAML scalars or flow lists."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (nested or dotted keys), then overrides; unknown keys fail."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML: {exc}") from None
        if tree is None:
            tree = {}
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg.update(flatten(tree))
    if overrides:
        cfg.update(overrides)
    return cfg
