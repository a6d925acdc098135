"""Experiment configuration: TOML files validated into pydantic models."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---- datasets ---------------------------------------------------------------

class PinwheelData(_Strict):
    name: Literal["pinwheel"]
    n_per_class: int = Field(512, ge=1)
    classes: int = Field(5, ge=1)
    radial_std: float = Field(0.3, gt=0)
    tangential_std: float = Field(0.05, gt=0)
    rate: float = 0.25
    seed: int | None = None


class TwoCirclesData(_Strict):
    name: Literal["two_circles"]
    n_per_class: int = Field(512, ge=1)
    radii: tuple[float, float] = (1.0, 0.5)
    noise_std: float = Field(0.03, ge=0)
    seed: int | None = None

    @model_validator(mode="after")
    def _distinct(self):
        if self.radii[0] == self.radii[1] or min(self.radii) <= 0:
            raise ValueError("radii must be distinct and positive")
        return self


class MnistData(_Strict):
    name: Literal["mnist"]
    images: str = "train-images-idx3-ubyte"
    labels: str = "train-labels-idx1-ubyte"
    digits: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    limit: int | None = Field(None, ge=1)
    dequantize: bool = True
    logit: bool = True
    seed: int | None = None

    @model_validator(mode="after")
    def _digits(self):
        if any(d < 0 or d > 9 for d in self.digits):
            raise ValueError("digits must lie in 0..9")
        return self


DatasetConfig = Annotated[Union[PinwheelData, TwoCirclesData, MnistData],
                          Field(discriminator="name")]


# ---- model ------------------------------------------------------------------

class CouplingSpec(_Strict):
    type: Literal["coupling"]
    hidden: list[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [8])
    repeat: int = Field(1, ge=1)


class MafSpec(_Strict):
    type: Literal["maf"]
    hidden: list[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [200])
    repeat: int = Field(1, ge=1)


class PluSpec(_Strict):
    type: Literal["plu"]
    repeat: int = Field(1, ge=1)


class PreluSpec(_Strict):
    type: Literal["prelu"]
    alpha: float = Field(1.0, gt=0)
    repeat: int = Field(1, ge=1)


class BatchNormSpec(_Strict):
    type: Literal["batchnorm"]
    eps: float = Field(1e-5, gt=0)
    momentum: float = Field(0.1, gt=0, le=1)
    repeat: int = Field(1, ge=1)


LayerSpec = Annotated[Union[CouplingSpec, MafSpec, PluSpec, PreluSpec, BatchNormSpec],
                      Field(discriminator="type")]


class ModelConfig(_Strict):
    components: int = Field(ge=1)
    posterior_hidden: list[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [16])
    posterior_init_gain: float = Field(1.0, ge=0)
    flow: list[LayerSpec] = Field(min_length=0)


# ---- training ---------------------------------------------------------------

class TemperatureConfig(_Strict):
    t0: float = Field(5.0, gt=0)
    t_min: float = Field(1.0, gt=0)
    decay: float | None = Field(None, ge=0)
    floor_fraction: float = Field(2.0 / 3.0, gt=0)


class TrainingConfig(_Strict):
    mode: Literal["unsupervised", "semisupervised"] = "unsupervised"
    epochs: int = Field(ge=0)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    temperature: TemperatureConfig = Field(default_factory=TemperatureConfig)
    pretrain_epochs: int = Field(0, ge=0)
    labeled_per_class: int = Field(32, ge=1)
    supervised_per_round: int = Field(1, ge=0)
    unsupervised_per_round: int = Field(1, ge=0)


class OutputConfig(_Strict):
    dir: str = "runs/experiment"
    checkpoint: str = "model.vmnf"
    metrics: str = "metrics.csv"


class ExperimentConfig(_Strict):
    seed: int = 0
    dataset: DatasetConfig
    model: ModelConfig
    training: TrainingConfig
    output: OutputConfig = Field(default_factory=OutputConfig)


class DatasetOnlyConfig(_Strict):
    """A file holding just a ``[dataset]`` block (plus optional seed), used by ``eval``."""

    seed: int = 0
    dataset: DatasetConfig


def _raise_config(err: ValidationError) -> None:
    first = err.errors()[0]
    key = ".".join(str(p) for p in first["loc"]) or "<root>"
    raise ConfigError(key, first["msg"]) from None


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        _raise_config(err)


def _read_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as err:
        raise ConfigError(str(path), f"cannot read file ({err.strerror})") from None
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as err:
        raise ConfigError(str(path), f"malformed TOML: {err}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(_read_toml(path))


def load_dataset_config(path: str | Path) -> DatasetOnlyConfig:
    """Accept either a full experiment config or a dataset-only file."""
    data = _read_toml(path)
    if "dataset" in data:
        data = {k: v for k, v in data.items() if k in ("seed", "dataset")}
    try:
        return DatasetOnlyConfig.model_validate(data)
    except ValidationError as err:
        _raise_config(err)
