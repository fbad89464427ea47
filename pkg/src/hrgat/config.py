"""Pipeline configuration: one JSON document, versioned, unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .evaluation.training import TrainConfig
from .synth import CITY_PRESETS, SynthConfig

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    d_hidden: int = Field(32, ge=1)
    layers: int = Field(2, ge=1)
    slope: float = Field(0.2, ge=0.0)


class TrainSection(_Strict):
    lr: float = Field(1e-3, gt=0.0)
    epochs: int = Field(200, ge=1)
    lam: float = Field(1e-4, ge=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    seed: int = 0
    target_transform: Literal["none", "log1p"] = "none"
    fine_zoom_bias: float = 2.0


class EvalSection(_Strict):
    n_folds: int = Field(5, ge=2)
    loco_city: str | None = None
    cbcv_mode: Literal["per_city", "pooled"] = "per_city"
    eval_zoom: int = 15
    fold_seed: int = 0
    importance_repeats: int = Field(10, ge=1)


class CitySpec(_Strict):
    name: str
    lat: float = Field(ge=-85.0, le=85.0)
    lon: float = Field(ge=-180.0, le=180.0)


def _default_cities() -> list[CitySpec]:
    return [CitySpec(name=n, lat=la, lon=lo) for n, (la, lo) in CITY_PRESETS.items()]


class SynthSection(_Strict):
    cities: list[CitySpec] = Field(default_factory=_default_cities)
    seed: int = 100
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("params")
    @classmethod
    def _known_params(cls, v: dict[str, Any]) -> dict[str, Any]:
        allowed = set(SynthConfig.__dataclass_fields__) - {"seed", "name", "center_lat", "center_lon"}
        unknown = sorted(set(v) - allowed)
        if unknown:
            raise ValueError(f"unknown synth parameters {unknown}")
        SynthConfig(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})
        return v

    def city_config(self, index: int) -> SynthConfig:
        c = self.cities[index]
        params = {k: tuple(x) if isinstance(x, list) else x for k, x in self.params.items()}
        return SynthConfig(seed=self.seed + index, name=c.name, center_lat=c.lat, center_lon=c.lon, **params)


class PathsSection(_Strict):
    # input directory holding one sub-directory per city; None means <out>/synth
    cities_dir: str | None = None


class PipelineConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    zooms: list[int] = Field(default_factory=lambda: [13, 14, 15])
    k: int = Field(8, ge=1)
    sigma_policy: Union[Literal["median_knn"], float, dict[str, float]] = "median_knn"
    rx_sensitivity_dbm: float = -100.0
    mobile_height_m: float = Field(1.5, gt=0.0)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    paths: PathsSection = Field(default_factory=PathsSection)

    @field_validator("zooms")
    @classmethod
    def _contiguous(cls, v: list[int]) -> list[int]:
        v = sorted(v)
        if not v or any(b - a != 1 for a, b in zip(v, v[1:])):
            raise ValueError("zooms must be a non-empty run of consecutive levels")
        if v[0] < 1 or v[-1] > 23:
            raise ValueError("zooms must lie in 1..23")
        return v

    @field_validator("sigma_policy")
    @classmethod
    def _positive_sigma(cls, v):
        vals = v.values() if isinstance(v, dict) else [] if isinstance(v, str) else [v]
        if any(s <= 0 for s in vals):
            raise ValueError("sigma must be positive")
        return v

    @model_validator(mode="after")
    def _eval_zoom_present(self):
        if self.eval.eval_zoom not in self.zooms:
            raise ValueError(f"eval_zoom {self.eval.eval_zoom} is not one of {self.zooms}")
        return self

    def sigma(self):
        if isinstance(self.sigma_policy, dict):
            return {int(z): s for z, s in self.sigma_policy.items()}
        return self.sigma_policy

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t.lr, epochs=t.epochs, lam=t.lam, optimizer=t.optimizer, seed=t.seed,
            d_hidden=self.model.d_hidden, n_layers=self.model.layers, slope=self.model.slope,
            target_transform=t.target_transform, fine_zoom_bias=t.fine_zoom_bias,
        )

    def with_seed(self, seed: int) -> "PipelineConfig":
        """``--seed`` overrides both the training seed and the synthetic-city seed."""
        doc = self.model_dump()
        doc["train"]["seed"] = seed
        doc["synth"]["seed"] = seed
        return PipelineConfig.model_validate(doc)

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        doc = json.load(fh)
    return PipelineConfig.model_validate(doc)
