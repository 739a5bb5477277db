"""Demand profiles and closed-loop demand timelines.

Demand enters the balance as consumption per bus; a PV unit is a negative
active demand at its bus.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ScenarioError
from .grid import DemandSnapshot

logger = logging.getLogger(__name__)

SCENARIO_KINDS = ("nominal", "varying-solar", "custom-file")
HOURS_PER_DAY = 24.0


@dataclass(frozen=True)
class DemandProfile:
    """Shape of the nominal daily demand, buses 0-based, powers in p.u."""
    load_bus: int = 5
    pv_bus: Optional[int] = 3
    peak: float = 2.5
    base: float = 1.4
    evening: float = 2.1
    pv_peak: float = 1.2
    power_factor: float = 0.95
    morning_hour: float = 8.0
    evening_hour: float = 19.0
    sunrise_hour: float = 6.0
    sunset_hour: float = 20.0
    peak_width: float = 2.0

    def __post_init__(self):
        if not 0 < self.power_factor <= 1:
            raise ScenarioError(f"power factor must lie in (0, 1], got {self.power_factor}")
        if self.base < 0 or self.peak < self.base or self.evening < self.base:
            raise ScenarioError("load shape needs 0 <= base <= peak and base <= evening")
        if self.pv_peak < 0:
            raise ScenarioError("pv_peak must be nonnegative")
        if not 0 <= self.sunrise_hour < self.sunset_hour <= HOURS_PER_DAY:
            raise ScenarioError("daylight window must satisfy 0 <= sunrise < sunset <= 24")
        if self.peak_width <= 0:
            raise ScenarioError("peak width must be positive")


@dataclass(frozen=True)
class Perturbation:
    """Bounded multiplicative noise plus a demand drop with a solar boost on one day."""
    load_noise: float = 0.05
    pv_noise: float = 0.1
    drop_day: int = 2
    drop_start_hour: float = 9.0
    drop_end_hour: float = 15.0
    drop_factor: float = 0.5
    pv_boost: float = 0.3

    def __post_init__(self):
        if self.load_noise < 0 or self.pv_noise < 0:
            raise ScenarioError("noise magnitudes must be nonnegative")
        if self.load_noise >= 1:
            raise ScenarioError(f"load noise {self.load_noise} can make demand negative")
        if self.drop_factor < 0:
            raise ScenarioError(f"drop factor {self.drop_factor} makes demand negative")
        if self.pv_boost < 0:
            raise ScenarioError("pv boost must be nonnegative")
        if self.drop_day < 1:
            raise ScenarioError("drop_day counts days from 1")


def _circular_bump(hours: np.ndarray, center: float, width: float) -> np.ndarray:
    d = np.abs(hours - center) % HOURS_PER_DAY
    d = np.minimum(d, HOURS_PER_DAY - d)
    return np.exp(-0.5 * (d / width) ** 2)


def _hours(n_per: int, dt: float) -> np.ndarray:
    if not dt > 0 or n_per < 1:
        raise ScenarioError(f"invalid period: n_per={n_per}, dt={dt}")
    if abs(n_per * dt - HOURS_PER_DAY) > 1e-9:
        raise ScenarioError(f"n_per={n_per} intervals of {dt} h do not cover one day")
    return np.arange(n_per) * dt


def load_shape(hours: np.ndarray, profile: DemandProfile) -> np.ndarray:
    """Active load with a morning peak and an evening rise."""
    return (profile.base
            + (profile.peak - profile.base) * _circular_bump(hours, profile.morning_hour, profile.peak_width)
            + (profile.evening - profile.base) * _circular_bump(hours, profile.evening_hour, profile.peak_width))


def pv_shape(hours: np.ndarray, profile: DemandProfile) -> np.ndarray:
    """Half-sine PV output, zero outside daylight."""
    day = (hours - profile.sunrise_hour) / (profile.sunset_hour - profile.sunrise_hour)
    out = profile.pv_peak * np.sin(np.pi * day)
    return np.where((day > 0) & (day < 1), out, 0.0)


def _snapshots(n_buses: int, profile: DemandProfile, load: np.ndarray, pv: np.ndarray) -> list[DemandSnapshot]:
    if not 0 <= profile.load_bus < n_buses or (profile.pv_bus is not None and not 0 <= profile.pv_bus < n_buses):
        raise ScenarioError(f"load/PV bus outside 0..{n_buses - 1}")
    tan_phi = math.tan(math.acos(profile.power_factor))
    out = []
    for p_load, p_pv in zip(load, pv):
        p = np.zeros(n_buses)
        q = np.zeros(n_buses)
        p[profile.load_bus] += p_load
        q[profile.load_bus] += p_load * tan_phi
        if profile.pv_bus is not None:
            p[profile.pv_bus] -= p_pv
        out.append(DemandSnapshot(p, q))
    return out


def make_nominal_profile(n_buses: int, n_per: int, dt: float = 1.0,
                         profile: Optional[DemandProfile] = None) -> list[DemandSnapshot]:
    """One day of demand d_per(0..n_per); the last snapshot repeats the first.

    Raises:
        ScenarioError: n_per * dt is not one day, or a bus is out of range
    """
    profile = profile or DemandProfile()
    hours = _hours(n_per, dt)
    snaps = _snapshots(n_buses, profile, load_shape(hours, profile), pv_shape(hours, profile))
    return snaps + [snaps[0]]


@dataclass
class ScenarioTimeline:
    """Forecasts d(.|k) and realized demand for a closed-loop run.

    Attributes:
        kind: One of SCENARIO_KINDS
        periodic: d_per(0..n_per-1)
        realized_series: Realized demand from step 0; past its end the periodic demand applies
        seed: Seed the realization was drawn with
    """
    kind: str
    periodic: list[DemandSnapshot]
    realized_series: list[DemandSnapshot] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if not self.periodic:
            raise ScenarioError("timeline needs a periodic demand")

    @property
    def n_per(self) -> int:
        return len(self.periodic)

    def periodic_demand(self) -> list[DemandSnapshot]:
        """d_per(0..n_per) as expected by the periodic problem."""
        return list(self.periodic) + [self.periodic[0]]

    def realized(self, k: int) -> DemandSnapshot:
        if k < 0:
            raise IndexError(f"negative step {k}")
        if k < len(self.realized_series):
            return self.realized_series[k]
        return self.periodic[k % self.n_per]

    def forecast(self, k: int, M: int) -> list[DemandSnapshot]:
        """d(0..M | k): realized demand ahead, the horizon end pinned to d_per."""
        out = [self.realized(k + i) for i in range(M)]
        out.append(self.periodic[(k + M) % self.n_per])
        return out


def nominal_timeline(d_per: list[DemandSnapshot]) -> ScenarioTimeline:
    """Timeline whose realization repeats d_per(0..n_per)."""
    return ScenarioTimeline("nominal", _open_period(d_per))


def _open_period(d_per: list[DemandSnapshot]) -> list[DemandSnapshot]:
    """Drop the closing snapshot of d_per(0..n_per), which must repeat the first."""
    d_per = list(d_per)
    if len(d_per) < 2 or not _same(d_per[0], d_per[-1]):
        raise ScenarioError("demand series is not periodic: d(0) != d(n_per)")
    return d_per[:-1]


def _same(a: DemandSnapshot, b: DemandSnapshot) -> bool:
    return bool(np.array_equal(a.p_d, b.p_d) and np.array_equal(a.q_d, b.q_d))


def make_perturbed_profile(n_buses: int, n_per: int, dt: float, n_steps: int, seed: int = 0,
                           profile: Optional[DemandProfile] = None,
                           perturbation: Optional[Perturbation] = None) -> ScenarioTimeline:
    """Varying-solar timeline: noisy load and PV with a demand drop on ``drop_day``.

    The realization covers ``n_steps`` plus one extra day so every forecast
    window of a run lies inside it.

    Raises:
        ScenarioError: Invalid period or a perturbation making non-PV demand negative
    """
    profile = profile or DemandProfile()
    pert = perturbation or Perturbation()
    hours = _hours(n_per, dt)
    base_load, base_pv = load_shape(hours, profile), pv_shape(hours, profile)
    periodic = _snapshots(n_buses, profile, base_load, base_pv)

    length = n_steps + n_per + 1
    t = np.arange(length)
    hour = (t % n_per) * dt
    day = t // n_per + 1
    rng = np.random.default_rng(seed)
    load = base_load[t % n_per] * (1.0 + pert.load_noise * rng.uniform(-1.0, 1.0, length))
    pv = base_pv[t % n_per] * (1.0 + pert.pv_noise * rng.uniform(-1.0, 1.0, length))
    window = (day == pert.drop_day) & (hour >= pert.drop_start_hour) & (hour < pert.drop_end_hour)
    load = np.where(window, load * pert.drop_factor, load)
    pv = np.where(window, pv * (1.0 + pert.pv_boost), pv)
    if np.any(load < 0):
        raise ScenarioError("perturbation makes load negative")
    logger.debug("perturbed timeline: %d steps, seed %d, %d steps in the drop window", length, seed, int(window.sum()))
    return ScenarioTimeline("varying-solar", periodic, _snapshots(n_buses, profile, load, np.maximum(pv, 0.0)), seed)


def demand_series_from_csv(path: Path, n_buses: int) -> list[DemandSnapshot]:
    """Read demand with columns ``p_<bus>`` and ``q_<bus>`` (1-based buses), one row per step.

    Missing bus columns are zero demand.

    Raises:
        ScenarioError: Unreadable file, unknown bus or non-numeric value
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise ScenarioError(f"cannot read demand file {path}: {e}") from e
    if not rows:
        raise ScenarioError(f"demand file {path} has no rows")

    out = []
    for r, row in enumerate(rows, start=2):
        p = np.zeros(n_buses)
        q = np.zeros(n_buses)
        for key, value in row.items():
            if key is None or key == "step" or value in (None, ""):
                continue
            kind, _, bus = key.strip().partition("_")
            if kind not in ("p", "q") or not bus.isdigit() or not 1 <= int(bus) <= n_buses:
                raise ScenarioError(f"{path}: unknown column {key!r}")
            try:
                (p if kind == "p" else q)[int(bus) - 1] = float(value)
            except ValueError as e:
                raise ScenarioError(f"{path}:{r}: {key}={value!r} is not a number") from e
        out.append(DemandSnapshot(p, q))
    return out


def custom_timeline(path: Path, n_buses: int, n_per: int) -> ScenarioTimeline:
    """Timeline from a CSV holding one period, d(0..n_per) or d(0..n_per-1)."""
    series = demand_series_from_csv(path, n_buses)
    if len(series) == n_per + 1:
        series = _open_period(series)
    if len(series) != n_per:
        raise ScenarioError(f"demand file has {len(series)} rows, expected {n_per} or {n_per + 1}")
    return ScenarioTimeline("custom-file", series)
