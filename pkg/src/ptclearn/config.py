"""Experiment configuration: one nested YAML (or JSON) document.

Every section maps onto a dataclass; unknown keys and invalid values raise
:class:`ConfigError`. ``ExperimentConfig.from_dict(cfg.to_dict()) == cfg``
holds for every valid config, so the echoed file reproduces a run.

Schema (defaults in brackets)::

    seed: int [0]
    output_dir: str ["runs/default"]
    workers: int [1]
    model:    {preset: mlp | cnn-s | custom [mlp], input_shape, num_classes, k [9],
               layers: [ {kind, in_features, out_features, kernel, stride, padding, photonic, size} ]}
    dataset:  {kind: blobs | idx | mnist-subset [blobs], path, limit, n_train, n_test,
               classes, features, spread, train_classes, test_classes, mean, std}
    noise:    NoiseConfig fields
    sampling: SamplingPlan fields
    twin:     {epochs [10], lr [0.002], weight_decay [0.01], batch_size [32]}
    ic:       {enabled, optimizer [zcd], epochs [400], init_step [0.1], decay [0.99], coarse_bits [4]}
    pm:       {enabled, optimizer [zcd], epochs [300], init_step [0.1], decay [0.99], coarse_bits [4],
               ideal_osp [false], osp_guard [true], init_offset [true]}
    sl:       {enabled, epochs, lr, weight_decay [0.01], lr_min [0], batch_size [32],
               train_electronic [true], max_steps_per_epoch}

SL ``epochs``/``lr`` left empty resolve to 20 / 2e-4 after mapping and
100 / 2e-3 from scratch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .noise import NoiseConfig, NoiseConfigError
from .sampling import SamplingConfigError, SamplingPlan
from .zoo import ZooSchedule


class ConfigError(ValueError):
    pass


LAYER_KINDS = ("linear", "conv2d", "relu", "avgpool", "adaptive_avgpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    photonic: bool = True
    size: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"layer kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if self.kind in ("linear", "conv2d") and (self.in_features < 1 or self.out_features < 1):
            raise ConfigError(f"{self.kind} layer needs positive in/out features")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0 or self.size < 1:
            raise ConfigError(f"invalid geometry in {self}")


def _preset_layers(preset: str) -> list[LayerSpec]:
    if preset == "mlp":
        return [LayerSpec("linear", 8, 16), LayerSpec("relu"), LayerSpec("linear", 16, 16), LayerSpec("relu"), LayerSpec("linear", 16, 4)]
    if preset == "cnn-s":
        # CONV8K3S2 - CONV6K3S2 - FC10 on 28x28 inputs
        return [
            LayerSpec("conv2d", 1, 8, kernel=3, stride=2, padding=1),
            LayerSpec("relu"),
            LayerSpec("conv2d", 8, 6, kernel=3, stride=2, padding=1),
            LayerSpec("relu"),
            LayerSpec("flatten"),
            LayerSpec("linear", 294, 10),
        ]
    raise ConfigError(f"unknown model preset {preset!r}")


_PRESET_SHAPES = {"mlp": ((8,), 4), "cnn-s": ((1, 28, 28), 10)}


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "mlp"
    input_shape: tuple | None = None
    num_classes: int | None = None
    k: int = 9
    layers: tuple = ()

    def __post_init__(self):
        if self.preset not in ("mlp", "cnn-s", "custom"):
            raise ConfigError(f"model preset must be mlp, cnn-s or custom, got {self.preset!r}")
        if self.preset == "custom" and (not self.layers or self.input_shape is None or self.num_classes is None):
            raise ConfigError("custom model needs layers, input_shape and num_classes")
        if not 2 <= self.k <= 32:
            raise ConfigError(f"block size k must lie in [2, 32], got {self.k}")

    @property
    def shape(self) -> tuple:
        """Per-sample input shape (preset default unless given)."""
        return tuple(self.input_shape) if self.input_shape is not None else _PRESET_SHAPES[self.preset][0]

    @property
    def classes(self) -> int:
        return int(self.num_classes) if self.num_classes is not None else _PRESET_SHAPES[self.preset][1]

    def layer_specs(self) -> list[LayerSpec]:
        return list(self.layers) if self.preset == "custom" else _preset_layers(self.preset)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    path: str = ""
    limit: int | None = None
    n_train: int = 400
    n_test: int = 200
    classes: int = 4
    features: int = 8
    spread: float = 1.0
    train_classes: tuple | None = None
    test_classes: tuple | None = None
    mean: float | None = None
    std: float | None = None

    def __post_init__(self):
        if self.kind not in ("blobs", "idx", "mnist-subset"):
            raise ConfigError(f"dataset kind must be blobs, idx or mnist-subset, got {self.kind!r}")
        if self.kind == "idx" and not self.path:
            raise ConfigError("dataset kind idx needs a path")


@dataclass(frozen=True)
class TwinConfig:
    epochs: int = 10
    lr: float = 0.002
    weight_decay: float = 0.01
    batch_size: int = 32


@dataclass(frozen=True)
class ZooStageConfig:
    enabled: bool = True
    optimizer: str = "zcd"
    epochs: int = 400
    init_step: float = 0.1
    decay: float = 0.99
    coarse_bits: int = 4

    def __post_init__(self):
        if self.optimizer not in ("zcd", "ztp", "zgd"):
            raise ConfigError(f"optimizer must be zcd, ztp or zgd, got {self.optimizer!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    def schedule(self, bits: int) -> ZooSchedule:
        try:
            return ZooSchedule.for_bitwidth(bits, self.init_step, self.decay, self.coarse_bits)
        except ValueError as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class MappingConfig(ZooStageConfig):
    epochs: int = 300
    ideal_osp: bool = False
    osp_guard: bool = True
    init_offset: bool = True


@dataclass(frozen=True)
class SLConfig:
    enabled: bool = True
    epochs: int | None = None
    lr: float | None = None
    weight_decay: float = 0.01
    lr_min: float = 0.0
    batch_size: int = 32
    train_electronic: bool = True
    max_steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError(f"sl.epochs must be >= 0, got {self.epochs}")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError(f"sl.lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"sl.batch_size must be positive, got {self.batch_size}")

    def resolved(self, after_mapping: bool) -> tuple[int, float]:
        epochs = self.epochs if self.epochs is not None else (20 if after_mapping else 100)
        lr = self.lr if self.lr is not None else (2e-4 if after_mapping else 2e-3)
        return epochs, lr


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    sampling: SamplingPlan = field(default_factory=SamplingPlan)
    twin: TwinConfig = field(default_factory=TwinConfig)
    ic: ZooStageConfig = field(default_factory=ZooStageConfig)
    pm: MappingConfig = field(default_factory=MappingConfig)
    sl: SLConfig = field(default_factory=SLConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        if self.model.input_shape is not None:
            d["model"]["input_shape"] = list(self.model.input_shape)
        d["model"]["layers"] = [asdict(layer) for layer in self.model.layers]
        for key in ("train_classes", "test_classes"):
            value = getattr(self.dataset, key)
            d["dataset"][key] = None if value is None else list(value)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config must be a mapping, got {type(d).__name__}")
        d = dict(d)
        sections = {
            "model": _model_from,
            "dataset": _dataset_from,
            "noise": lambda v: _build(NoiseConfig, v, "noise"),
            "sampling": lambda v: _build(SamplingPlan, v, "sampling"),
            "twin": lambda v: _build(TwinConfig, v, "twin"),
            "ic": lambda v: _build(ZooStageConfig, v, "ic"),
            "pm": lambda v: _build(MappingConfig, v, "pm"),
            "sl": lambda v: _build(SLConfig, v, "sl"),
        }
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                kwargs[key] = sections[key](value or {})
            elif key in ("seed", "output_dir", "workers"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        return _construct(cls, kwargs, "config")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config: {e}") from e
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as f:
                return cls.from_text(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def save(self, path: str):
        with open(path, "w") as f:
            f.write(self.to_yaml())

    # -- overrides -------------------------------------------------------
    def with_overrides(self, **flags) -> "ExperimentConfig":
        """Apply CLI-style overrides; ``None`` values are ignored.

        Recognized: ``alpha_w``, ``alpha_c``, ``alpha_d``, ``bitwidth``,
        ``gamma_std``, ``crosstalk``, ``workers``, ``seed``, ``output_dir``
        and ``set`` (a list of ``section.key=value`` strings).
        """
        cfg = self
        sampling = {"alpha_w": "alpha_w", "alpha_c": "column_alpha_c", "alpha_d": "data_alpha_d"}
        noise = {"bitwidth": "bitwidth_unitary", "gamma_std": "gamma_std", "crosstalk": "crosstalk_factor"}
        for flag, value in flags.items():
            if value is None or flag == "set":
                continue
            if flag in sampling:
                cfg = _replace(cfg, "sampling", **{sampling[flag]: value})
            elif flag in noise:
                cfg = _replace(cfg, "noise", **{noise[flag]: value})
            elif flag in ("workers", "seed", "output_dir"):
                cfg = _construct(type(cfg), {**_shallow(cfg), flag: value}, "config")
            else:
                raise ConfigError(f"unknown override {flag!r}")
        for item in flags.get("set") or ():
            cfg = cfg.with_setting(item)
        return cfg

    def with_setting(self, item: str) -> "ExperimentConfig":
        """Apply one ``dotted.key=value`` override (value parsed as YAML)."""
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        d = self.to_dict()
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def _shallow(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _construct(cls, kwargs: dict, where: str):
    try:
        return cls(**kwargs)
    except (NoiseConfigError, SamplingConfigError, ConfigError) as e:
        raise ConfigError(f"{where}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return _construct(cls, d, where)


def _replace(cfg: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    try:
        new = replace(getattr(cfg, section), **changes)
    except (NoiseConfigError, SamplingConfigError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e
    return replace(cfg, **{section: new})


def _model_from(d: dict) -> ModelConfig:
    d = dict(d)
    layers = d.pop("layers", None) or ()
    d["layers"] = tuple(_build(LayerSpec, layer, "model.layers") for layer in layers)
    if d.get("input_shape") is not None:
        d["input_shape"] = tuple(int(s) for s in d["input_shape"])
    return _build(ModelConfig, d, "model")


def _dataset_from(d: dict) -> DatasetConfig:
    d = dict(d)
    for key in ("train_classes", "test_classes"):
        if d.get(key) is not None:
            d[key] = tuple(int(c) for c in d[key])
    return _build(DatasetConfig, d, "dataset")
