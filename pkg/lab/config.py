"""TOML experiment configs validated into pydantic models."""

import difflib
from enum import StrEnum
from pathlib import Path
from typing import Sequence, get_args

import toml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveInt,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from attacks.specs import PRESETS, AttackSpec, preset
from lab.datasets import Dataset, SyntheticKind, load_csv, load_idx, make_synthetic
from lab.exceptions import ConfigError
from perturb_dist.threat import ThreatModel
from trainers.specs import TrainSpec

DEFAULT_SUITE = ("natural", "fgsm", "pgd20", "mim20", "cw30")


class DatasetSource(StrEnum):
    SYNTHETIC = "synthetic"
    CSV = "csv"
    IDX = "idx"


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    source: DatasetSource = DatasetSource.SYNTHETIC
    kind: SyntheticKind = SyntheticKind.TWO_MOONS
    n: PositiveInt = Field(default=1000, ge=2)
    noise: float = Field(default=0.1, ge=0.0)
    path: Path | None = None
    images: Path | None = None
    labels: Path | None = None
    split_seed: NonNegativeInt = 0
    test_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)

    @field_validator("path", "images", "labels")
    @classmethod
    def resolve(cls, value: Path | None, info: ValidationInfo):
        if value is None:
            return None
        base = (info.context or {}).get("base_dir")
        if base is not None and not value.is_absolute():
            value = Path(base) / value
        value = value.resolve()
        if not value.exists():
            raise ValueError(f"{value} does not exist")
        return value

    @model_validator(mode="after")
    def check_source(self):
        if self.source is DatasetSource.CSV and self.path is None:
            raise ValueError("a csv dataset needs 'path'")
        if self.source is DatasetSource.IDX and (self.images is None or self.labels is None):
            raise ValueError("an idx dataset needs 'images' and 'labels'")
        return self

    def load(self) -> Dataset:
        match self.source:
            case DatasetSource.CSV:
                return load_csv(self.path)
            case DatasetSource.IDX:
                return load_idx(self.images, self.labels)
        return make_synthetic(self.kind, self.n, self.noise, self.split_seed)


class EvalConfig(BaseModel):
    """Which attacks form the robustness suite and which analysis probes run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    suite: tuple[str, ...] = DEFAULT_SUITE
    probes: bool = True
    probe_points: PositiveInt = 20
    diversity_samples: PositiveInt = Field(default=20, ge=2)
    landscape_points: PositiveInt = 3
    resolution: PositiveInt = Field(default=41, ge=3)
    hessian_iters: PositiveInt = 100


class ExperimentConfig(BaseModel):
    """One experiment: data, training, attacks and evaluation under a shared threat model.

    ``threat_model`` and ``seed`` apply to training as well; see :meth:`train_spec`.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "run"
    seed: NonNegativeInt = 0
    out: Path | None = None
    threat_model: ThreatModel = Field(default_factory=ThreatModel)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    train: TrainSpec = Field(default_factory=TrainSpec)
    attacks: tuple[AttackSpec, ...] = ()
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def check_suite(self):
        labels = {spec.label for spec in self.attacks}
        for name in self.eval.suite:
            if name not in labels and name not in PRESETS:
                raise ValueError(f"eval.suite names unknown attack {name!r}")
        return self

    def train_spec(self) -> TrainSpec:
        return self.train.model_copy(update={"threat_model": self.threat_model, "seed": self.seed})

    def attack(self, name: str) -> AttackSpec:
        """A configured attack by label, falling back to the named preset."""
        for spec in self.attacks:
            if spec.label == name:
                return spec
        try:
            return preset(name)
        except KeyError as e:
            raise ConfigError(f"unknown attack {name!r}", field="attacks") from e

    def suite(self) -> list[AttackSpec]:
        return [self.attack(name) for name in self.eval.suite]


def _nested_model(annotation):
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation
    for arg in get_args(annotation):
        found = _nested_model(arg)
        if found is not None:
            return found
    return None


def _known_keys(loc: Sequence) -> list[str]:
    model = ExperimentConfig
    for part in loc:
        if isinstance(part, int):
            continue
        field = model.model_fields.get(part)
        if field is None:
            return []
        nested = _nested_model(field.annotation)
        if nested is None:
            return []
        model = nested
    return list(model.model_fields)


def _config_error(error: ValidationError) -> ConfigError:
    first = error.errors()[0]
    loc = list(first["loc"])
    field = ".".join(str(part) for part in loc) or None
    if first["type"] == "extra_forbidden":
        key = str(loc[-1])
        known = _known_keys(loc[:-1])
        matches = difflib.get_close_matches(key, known, n=1)
        hint = f"; did you mean {matches[0]!r}?" if matches else ""
        return ConfigError(f"unknown key {field!r}{hint}", field=field)
    message = f"{field}: {first['msg']}" if field else first["msg"]
    return ConfigError(message, field=field)


def _parse_value(text: str):
    try:
        return toml.loads(f"value = {text}")["value"]
    except toml.TomlDecodeError:
        return text


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` assignments; values are read as TOML scalars."""
    for assignment in overrides:
        key, sep, text = assignment.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {assignment!r} is not of the form key=value")
        *parents, leaf = key.strip().split(".")
        node = tree
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r} descends into a scalar", field=key)
            node = child
        node[leaf] = _parse_value(text.strip())
    return tree


def parse_config(
    text: str, base_dir: Path | None = None, overrides: Sequence[str] = ()
) -> ExperimentConfig:
    try:
        tree = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"line {e.lineno}: {e.msg}", line=e.lineno) from e
    apply_overrides(tree, overrides)
    try:
        return ExperimentConfig.model_validate(tree, context={"base_dir": base_dir})
    except ValidationError as e:
        raise _config_error(e) from e


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read and validate a TOML config; relative data paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, base_dir=path.parent, overrides=overrides)


def dump_config(config: ExperimentConfig) -> str:
    return toml.dumps(config.model_dump(mode="json", exclude_none=True))
