"""TOML configuration: grid, devices, demand shape and run settings.

Bus numbers are 1-based in the file and 0-based everywhere else.
"""

from __future__ import annotations

import logging
import math
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dispatch import BatteryParams, DeviceParams, GeneratorParams
from .errors import ConfigError, MicrogridError
from .grid import Line, MicrogridSpec
from .nmpc import NmpcConfig
from .scenario import DemandProfile, Perturbation

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "six_bus.toml"
HOURS_PER_30_DAYS = 30 * 24

Duration = Union[float, Literal["inf"]]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class BusModel(_Section):
    id: int = Field(..., ge=1)
    v_min: Optional[float] = None
    v_max: Optional[float] = None
    theta_min_deg: Optional[float] = None
    theta_max_deg: Optional[float] = None
    g_shunt: float = 0.0
    b_shunt: float = 0.0


class LineModel(_Section):
    from_bus: int = Field(..., ge=1, alias="from")
    to_bus: int = Field(..., ge=1, alias="to")
    r: Optional[float] = None
    x: Optional[float] = None
    g: Optional[float] = None
    b: Optional[float] = None

    @model_validator(mode="after")
    def _one_parameterization(self):
        impedance = self.r is not None and self.x is not None
        admittance = self.g is not None and self.b is not None
        if impedance == admittance:
            raise ValueError("give either (r, x) or (g, b) for every line")
        if impedance and self.r == 0 and self.x == 0:
            raise ValueError("line impedance must be nonzero")
        return self


class GridModel(_Section):
    n_buses: int = Field(..., ge=1)
    reference_bus: int = Field(..., ge=1)
    v_min: float = Field(0.95, gt=0)
    v_max: float = Field(1.05, gt=0)
    theta_max_deg: float = Field(5.0, gt=0, lt=90)
    bus: list[BusModel] = Field(default_factory=list)
    line: list[LineModel] = Field(default_factory=list)

    @model_validator(mode="after")
    def _ordered(self):
        if self.v_min > self.v_max:
            raise ValueError("v_min > v_max")
        if self.reference_bus > self.n_buses:
            raise ValueError(f"reference_bus {self.reference_bus} outside 1..{self.n_buses}")
        return self


class GeneratorModel(_Section):
    bus: int = Field(..., ge=1)
    name: str = "DG"
    p_min: float = Field(1.0, gt=0)
    p_max: float = 3.0
    q_min: float = -2.0
    q_max: float = 2.0
    ramp: float = Field(1.0, gt=0, le=1)
    min_on: int = Field(2, ge=1)
    max_on: Duration = "inf"
    min_off: int = Field(2, ge=1)
    max_off: Duration = "inf"
    max_startups: int = Field(2, ge=0)
    base_cost: float = 5.0
    fuel_cost: float = 20.0
    startup_cost: float = 5.0


class BatteryModel(_Section):
    bus: int = Field(..., ge=1)
    name: str = "BA"
    p_min: float = -5.0
    p_max: float = 5.0
    q_min: float = -2.0
    q_max: float = 2.0
    capacity_min: float = 0.5
    capacity_max: float = 5.0
    efficiency: float = Field(0.95, gt=0, le=1)
    loss_per_30_days: Optional[float] = Field(None, ge=0, le=1)
    loss_rate: Optional[float] = Field(None, ge=0)
    throughput_cost: float = 1.0
    soc_aging_cost: float = 1.0

    @model_validator(mode="after")
    def _one_loss(self):
        if self.loss_per_30_days is not None and self.loss_rate is not None:
            raise ValueError("give loss_per_30_days or loss_rate, not both")
        return self

    def hourly_loss(self) -> float:
        if self.loss_rate is not None:
            return self.loss_rate
        if self.loss_per_30_days is not None:
            return self.loss_per_30_days / HOURS_PER_30_DAYS
        return 0.04 / HOURS_PER_30_DAYS


class DemandModel(_Section):
    load_bus: int = Field(6, ge=1)
    pv_bus: Optional[int] = Field(None, ge=1)
    peak: float = 2.5
    base: float = 1.4
    evening: float = 2.1
    pv_peak: float = 1.2
    power_factor: float = 0.95
    morning_hour: float = 8.0
    evening_hour: float = 19.0
    sunrise_hour: float = 6.0
    sunset_hour: float = 20.0


class PerturbationModel(_Section):
    load_noise: float = 0.05
    pv_noise: float = 0.1
    drop_day: int = 2
    drop_start_hour: float = 9.0
    drop_end_hour: float = 15.0
    drop_factor: float = 0.5
    pv_boost: float = 0.3


class RunModel(_Section):
    dt: float = Field(1.0, gt=0)
    horizon: int = Field(48, ge=1)
    n_per: int = Field(24, ge=1)
    steps: int = Field(48, ge=1)
    seed: int = 0
    gap: float = Field(1e-4, gt=0)
    feas_tol: float = Field(1e-6, gt=0)
    node_limit: Optional[int] = Field(None, ge=1)
    time_limit: Optional[float] = Field(None, gt=0)
    node_order: Literal["best-first", "depth-first"] = "best-first"
    deviation_check: bool = True
    terminal_soc: Literal["equality", "at-least"] = "equality"
    exact_battery_abs: bool = False
    scenario: Literal["nominal", "varying-solar", "custom-file"] = "nominal"
    demand_file: Optional[str] = None


class ConfigFile(_Section):
    grid: GridModel
    generator: list[GeneratorModel] = Field(default_factory=list)
    battery: list[BatteryModel] = Field(default_factory=list)
    demand: DemandModel = Field(default_factory=DemandModel)
    perturbation: PerturbationModel = Field(default_factory=PerturbationModel)
    run: RunModel = Field(default_factory=RunModel)


@dataclass
class RunConfig:
    """Everything a CLI command needs, in API units."""
    spec: MicrogridSpec
    params: DeviceParams
    profile: DemandProfile
    perturbation: Perturbation
    nmpc: NmpcConfig
    n_per: int = 24
    steps: int = 48
    seed: int = 0
    scenario: str = "nominal"
    demand_file: Optional[Path] = None
    source: Optional[Path] = None
    raw: dict = field(default_factory=dict, repr=False)


def _duration(value: Duration) -> float:
    return math.inf if value == "inf" else float(value)


def _bus(one_based: int, n: int, what: str) -> int:
    if not 1 <= one_based <= n:
        raise ConfigError(f"{what} bus {one_based} outside 1..{n}")
    return one_based - 1


def _build_spec(grid: GridModel, gens: list[GeneratorModel], bats: list[BatteryModel]) -> MicrogridSpec:
    n = grid.n_buses
    ref = grid.reference_bus - 1
    th = math.radians(grid.theta_max_deg)
    v_bounds = np.tile([grid.v_min, grid.v_max], (n, 1))
    theta_bounds = np.tile([-th, th], (n, 1))
    shunt = [0j] * n
    for bus in grid.bus:
        i = _bus(bus.id, n, "per-bus entry")
        if bus.v_min is not None:
            v_bounds[i, 0] = bus.v_min
        if bus.v_max is not None:
            v_bounds[i, 1] = bus.v_max
        if bus.theta_min_deg is not None:
            theta_bounds[i, 0] = math.radians(bus.theta_min_deg)
        if bus.theta_max_deg is not None:
            theta_bounds[i, 1] = math.radians(bus.theta_max_deg)
        shunt[i] = complex(bus.g_shunt, bus.b_shunt)
    v_bounds[ref] = 1.0
    theta_bounds[ref] = 0.0

    lines = []
    for ln in grid.line:
        a, b = _bus(ln.from_bus, n, "line"), _bus(ln.to_bus, n, "line")
        if ln.r is not None:
            lines.append(Line.from_impedance(a, b, ln.r, ln.x))
        else:
            lines.append(Line(a, b, ln.g, ln.b))
    return MicrogridSpec(
        n_buses=n,
        generators=tuple(_bus(g.bus, n, "generator") for g in gens),
        batteries=tuple(_bus(b.bus, n, "battery") for b in bats),
        reference_bus=ref,
        lines=tuple(lines),
        ground_admittance=tuple(shunt),
        v_bounds=v_bounds,
        theta_bounds=theta_bounds,
    )


def _build_params(gens: list[GeneratorModel], bats: list[BatteryModel]) -> DeviceParams:
    generators = tuple(
        GeneratorParams(
            p_min=g.p_min, p_max=g.p_max, q_min=g.q_min, q_max=g.q_max, ramp=g.ramp,
            min_on=g.min_on, max_on=_duration(g.max_on), min_off=g.min_off, max_off=_duration(g.max_off),
            max_startups=g.max_startups, base_cost=g.base_cost, fuel_cost=g.fuel_cost,
            startup_cost=g.startup_cost, name=g.name,
        )
        for g in gens
    )
    batteries = tuple(
        BatteryParams(
            p_min=b.p_min, p_max=b.p_max, q_min=b.q_min, q_max=b.q_max,
            capacity_min=b.capacity_min, capacity_max=b.capacity_max, efficiency=b.efficiency,
            loss_rate=b.hourly_loss(), throughput_cost=b.throughput_cost,
            soc_aging_cost=b.soc_aging_cost, name=b.name,
        )
        for b in bats
    )
    return DeviceParams(generators, batteries)


def build_run_config(data: dict, source: Optional[Path] = None) -> RunConfig:
    """Validate a parsed TOML document and convert it to domain objects.

    Raises:
        ConfigError: Schema violation or inconsistent values
    """
    try:
        cfg = ConfigFile.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration{f' {source}' if source else ''}: {e}") from e

    n = cfg.grid.n_buses
    try:
        spec = _build_spec(cfg.grid, cfg.generator, cfg.battery)
        params = _build_params(cfg.generator, cfg.battery)
        d = cfg.demand
        profile = DemandProfile(
            load_bus=_bus(d.load_bus, n, "load"),
            pv_bus=None if d.pv_bus is None else _bus(d.pv_bus, n, "PV"),
            peak=d.peak, base=d.base, evening=d.evening, pv_peak=d.pv_peak, power_factor=d.power_factor,
            morning_hour=d.morning_hour, evening_hour=d.evening_hour,
            sunrise_hour=d.sunrise_hour, sunset_hour=d.sunset_hour,
        )
        perturbation = Perturbation(**cfg.perturbation.model_dump())
        r = cfg.run
        nmpc = NmpcConfig(
            horizon=r.horizon, dt=r.dt, gap=r.gap, feas_tol=r.feas_tol, node_limit=r.node_limit,
            time_limit=r.time_limit, node_order=r.node_order, deviation_check=r.deviation_check,
            terminal_soc=r.terminal_soc, exact_battery_abs=r.exact_battery_abs,
        )
    except MicrogridError:
        raise
    except ValueError as e:
        # domain constructors validate physical consistency
        raise ConfigError(f"invalid configuration{f' {source}' if source else ''}: {e}") from e

    demand_file = None
    if r.demand_file is not None:
        demand_file = Path(r.demand_file)
        if not demand_file.is_absolute() and source is not None:
            demand_file = source.parent / demand_file
    return RunConfig(
        spec=spec, params=params, profile=profile, perturbation=perturbation, nmpc=nmpc,
        n_per=r.n_per, steps=r.steps, seed=r.seed, scenario=r.scenario, demand_file=demand_file,
        source=source, raw=data,
    )


def load_config(path: Optional[Path] = None) -> RunConfig:
    """Read and validate a TOML configuration (default: the shipped 6-bus grid)."""
    path = Path(path) if path is not None else DEFAULT_CONFIG
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.debug("loaded config %s", path)
    return build_run_config(data, source=path)
