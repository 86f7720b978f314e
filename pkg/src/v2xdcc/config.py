"""Scenario configuration schema and YAML loading."""
from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .control import ControllerMode


class ConfigError(ValueError):
    pass


class PriorityScheme(str, Enum):
    EQUAL = "equal"
    DIFFERENTIATED = "differentiated"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ControllerConfig(_Strict):
    alpha: float = Field(0.016, gt=0, lt=1)
    beta_base: float = Field(0.0012, gt=0)
    cbr_target: float = Field(0.68, gt=0, lt=1)
    delta_min: Optional[float] = Field(0.0006, ge=0, le=1)
    delta_max: Optional[float] = Field(0.03, ge=0, le=1)
    gain_up_max: Optional[float] = Field(0.0005, gt=0)
    gain_down_max: Optional[float] = Field(0.00025, gt=0)
    scale_clamps_with_beta: bool = True
    bounds_under_dpa: bool = False
    r_base: float = Field(17_000.0, gt=0)
    zero_demand_ratio: float = Field(0.01, gt=0)
    observation_window: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _bounds(self) -> "ControllerConfig":
        lo = self.delta_min or 0.0
        hi = 1.0 if self.delta_max is None else self.delta_max
        if lo > hi:
            raise ValueError(f"delta_min ({lo}) must not exceed delta_max ({hi})")
        return self


class ChannelConfig(_Strict):
    data_rate: float = Field(6_000_000.0, gt=0)
    per_message_overhead: float = Field(40e-6, ge=0)
    header_bytes: int = Field(60, ge=0)
    sensing_range: float = Field(700.0, gt=0)
    cbr_window: float = Field(0.2, gt=0)


class ServicesConfig(_Strict):
    s2_min_size: int = Field(100, ge=1)
    cam_position_threshold: float = Field(4.0, gt=0)
    cam_speed_threshold: float = Field(0.5, gt=0)
    cam_heading_threshold: float = Field(4.0, gt=0)


class SingleHopConfig(_Strict):
    type1: int = Field(20, ge=0)
    type2: int = Field(20, ge=0)
    type3: int = Field(20, ge=0)
    total: int = Field(60, ge=1)
    spacing: float = Field(2.0, gt=0)

    @model_validator(mode="after")
    def _counts(self) -> "SingleHopConfig":
        if self.type1 + self.type2 + self.type3 != self.total:
            raise ValueError(
                f"type counts {self.type1}+{self.type2}+{self.type3} do not sum to total={self.total}"
            )
        return self


class HighwayConfig(_Strict):
    vehicles: int = Field(120, ge=2)
    lanes: Literal[6] = 6
    lane_width: float = Field(4.0, gt=0)
    density_per_km_lane: float = Field(20.0, gt=0)
    road_length: Optional[float] = Field(None, gt=0)
    speed_min_kmh: float = Field(50.0, gt=0)
    speed_max_kmh: float = Field(70.0, gt=0)
    headway_time: float = Field(1.5, gt=0)
    min_gap: float = Field(10.0, ge=0)
    lane_change_cooldown: float = Field(3.0, ge=0)
    mobility_step: float = Field(0.1, gt=0)
    low_sensor_fraction: float = Field(0.5, ge=0, le=1)

    @model_validator(mode="after")
    def _geometry(self) -> "HighwayConfig":
        if self.speed_min_kmh > self.speed_max_kmh:
            raise ValueError("speed_min_kmh must not exceed speed_max_kmh")
        if self.length < self.vehicles / self.lanes * self.min_gap:
            raise ValueError(f"road_length {self.length:.1f} m too short for {self.vehicles} vehicles")
        return self

    @property
    def length(self) -> float:
        """Ring length in metres; derived from the density knob when unset."""
        if self.road_length is not None:
            return self.road_length
        return 1000.0 * self.vehicles / (self.lanes * self.density_per_km_lane)


class ScenarioConfig(_Strict):
    scenario: Literal["single_hop", "highway"]
    mode: ControllerMode = ControllerMode.DPA
    priorities: PriorityScheme = PriorityScheme.EQUAL
    duration: float = Field(40.0, ge=0)
    warmup: float = Field(10.0, ge=0)
    seed: int = Field(1, ge=0)
    control_epoch: float = Field(0.2, gt=0)
    synchronized: bool = False
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    channel: ChannelConfig = Field(default_factory=ChannelConfig)
    services: ServicesConfig = Field(default_factory=ServicesConfig)
    single_hop: SingleHopConfig = Field(default_factory=SingleHopConfig)
    highway: HighwayConfig = Field(default_factory=HighwayConfig)

    @model_validator(mode="after")
    def _epoch(self) -> "ScenarioConfig":
        if abs(self.control_epoch - self.channel.cbr_window) > 1e-12:
            raise ValueError(
                f"control_epoch ({self.control_epoch}) must equal channel.cbr_window ({self.channel.cbr_window})"
            )
        return self

    def priority_map(self) -> dict[str, int]:
        if self.scenario == "single_hop":
            labels = ["S1", "S2", "S3"]
        else:
            labels = ["CAS", "CPS"]
        if self.priorities is PriorityScheme.EQUAL:
            return {label: 0 for label in labels}
        return {label: i for i, label in enumerate(labels)}


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def with_seed(config: ScenarioConfig, seed: int) -> ScenarioConfig:
    """Copy of ``config`` with another seed, validated like a fresh config."""
    return config_from_dict({**config.model_dump(), "seed": seed})


def parse_config(source: Union[str, Path]) -> ScenarioConfig:
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return config_from_dict(data)
