"""Quasi-static microgrid plant model.

A PV unit, a battery (BESS), a critical load and a sheddable controllable
load behind a resistive cable, either grid-connected (breaker closed, the
grid balances the bus) or islanded (the BESS balances the bus). Plant-side
PV/BESS watts are scaled down by a fixed factor of 100 to control-side
watts before they appear in telemetry, matching the load measurements.

All powers in this module are control-side watts unless a name says
otherwise. Sign convention: p_bess > 0 discharges the battery, p_grid > 0
imports from the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional

import numpy as np

from .errors import ConfigError


class BreakerStatus(IntEnum):
    """Grid breaker position; wire encoding is the enum value."""

    GRID_CONNECTED = 0
    ISLANDED = 1


# Channel order used everywhere: telemetry payload, dataset columns, detector inputs.
CHANNELS = ("p_bess_w", "p_pv_w", "p_grid_w", "p_load_w", "v_load_v")


@dataclass(frozen=True)
class PlantConfig:
    """Ratings and timing of the simulated plant.

    pv_rated_w / bess_rated_w / bess_capacity_wh are plant-side; the loads
    and everything downstream of the scaling are control-side.
    """

    pv_rated_w: float = 250_000.0
    bess_rated_w: float = 100_000.0
    scale_factor: float = 100.0
    crit_load_w: float = 600.0
    ctrl_load_w: float = 800.0
    v_nominal: float = 120.0
    r_cable: float = 0.0744
    bess_capacity_wh: float = 50_000.0
    dt_s: float = 0.01
    telemetry_period_s: float = 0.1

    def __post_init__(self):
        for name in ("pv_rated_w", "bess_rated_w", "v_nominal",
                     "bess_capacity_wh", "dt_s", "telemetry_period_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("crit_load_w", "ctrl_load_w", "r_cable"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.scale_factor != 100.0:
            raise ConfigError("scale_factor is fixed at 100")
        if self.dt_s > self.telemetry_period_s:
            raise ConfigError("dt_s must not exceed telemetry_period_s")
        n = self.telemetry_period_s / self.dt_s
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("telemetry_period_s must be an integer multiple of dt_s")

    @property
    def steps_per_frame(self) -> int:
        return round(self.telemetry_period_s / self.dt_s)


@dataclass(frozen=True)
class NoiseSpec:
    """Per-channel zero-mean Gaussian sigma, applied after plant->control scaling.

    All zeros (the default) disables noise; draws are only consumed for
    channels with sigma > 0, so enabling noise on one channel leaves the
    others bit-identical to a noiseless frame.
    """

    p_bess_w: float = 0.0
    p_pv_w: float = 0.0
    p_grid_w: float = 0.0
    p_load_w: float = 0.0
    v_load_v: float = 0.0

    @property
    def enabled(self) -> bool:
        return any(s > 0 for s in self.sigmas)

    @property
    def sigmas(self) -> tuple:
        return (self.p_bess_w, self.p_pv_w, self.p_grid_w,
                self.p_load_w, self.v_load_v)

    @classmethod
    def off(cls) -> "NoiseSpec":
        return cls()

    @classmethod
    def default_sensor(cls) -> "NoiseSpec":
        """Small absolute sensor noise: 5 W on power channels, 0.05 V on voltage."""
        return cls(5.0, 5.0, 5.0, 5.0, 0.05)


@dataclass
class PlantState:
    """Evolving plant state; stepped by `step`, never mutated in place."""

    soc_pct: float = 35.0
    breaker: BreakerStatus = BreakerStatus.GRID_CONNECTED
    ctrl_load_connected: bool = True
    insolation: float = 1000.0
    bess_setpoint_w: float = 0.0
    t_s: float = 0.0
    blackout: bool = False
    # set by a LoadCommand carrying a non-default wattage; None = cfg.ctrl_load_w
    ctrl_load_w_override: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.soc_pct <= 100.0:
            raise ConfigError("soc_pct must be within [0, 100]")
        if self.insolation < 0:
            raise ConfigError("insolation must be >= 0")


@dataclass(frozen=True)
class MeasurementVector:
    """The five control-side measurements the control center consumes."""

    p_bess_w: float
    p_pv_w: float
    p_grid_w: float
    p_load_w: float
    v_load_v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_bess_w, self.p_pv_w, self.p_grid_w,
                         self.p_load_w, self.v_load_v], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "MeasurementVector":
        return cls(*(float(x) for x in a))


@dataclass(frozen=True)
class TelemetryFrame:
    """One sampling instant as it crosses the wire (plant -> control center).

    soc_pct is the optional in-band battery state of charge; frames carry it
    by default so the control center does not have to integrate its own
    estimate.
    """

    seq: int
    t_ms: int
    meas: MeasurementVector
    breaker_reported: BreakerStatus
    soc_pct: Optional[float] = None


@dataclass(frozen=True)
class LoadCommand:
    """Control-center command for the controllable load (control center -> plant)."""

    seq: int
    ctrl_load_connect: bool
    setpoint_w: float

    def __post_init__(self):
        if self.setpoint_w < 0:
            raise ConfigError("setpoint_w must be >= 0")


@dataclass(frozen=True)
class PowerFlow:
    """Instantaneous control-side power balance of the bus.

    p_load_total_w is the power injected into the load feeder (device power
    plus cable loss); the balance p_grid + p_pv + p_bess - p_load_total is
    zero by construction.
    """

    p_bess_w: float
    p_pv_w: float
    p_grid_w: float
    p_device_w: float
    p_load_total_w: float
    v_load_v: float


def pv_power(insolation: float, cfg: PlantConfig) -> float:
    """Control-side PV output: linear in insolation, clipped at rated power.

    Rated plant-side output at insolation 1000; the curve is a quasi-static
    stand-in for the cell model, which is out of scope.
    """
    if insolation < 0:
        raise ConfigError("insolation must be >= 0")
    return cfg.pv_rated_w * min(insolation / 1000.0, 1.0) / cfg.scale_factor


def load_power(state: PlantState, cfg: PlantConfig) -> tuple:
    """Device draw, feeder injection and load-bus voltage for the current state.

    The cable between amplifier and load dissipates i^2*r, so the feeder
    injects slightly more than the devices consume and the load bus sits
    slightly below nominal. Returns (p_device_w, p_injected_w, v_load_v).
    """
    if state.blackout and state.breaker is BreakerStatus.ISLANDED:
        return 0.0, 0.0, 0.0
    ctrl_w = cfg.ctrl_load_w if state.ctrl_load_w_override is None else state.ctrl_load_w_override
    p_device = cfg.crit_load_w + (ctrl_w if state.ctrl_load_connected else 0.0)
    i = p_device / cfg.v_nominal
    loss = i * i * cfg.r_cable
    return p_device, p_device + loss, cfg.v_nominal - i * cfg.r_cable


def power_flow(state: PlantState, cfg: PlantConfig) -> PowerFlow:
    """Solve the quasi-static power balance for the current state.

    Grid-connected: the BESS follows its setpoint (held at zero past an
    empty/full battery) and the grid covers the residual. Islanded: the
    grid term is zero and the BESS covers the residual; PV is curtailed if
    the battery is full and generation exceeds the load.
    """
    p_device, p_injected, v_load = load_power(state, cfg)
    if state.blackout and state.breaker is BreakerStatus.ISLANDED:
        return PowerFlow(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    p_pv = pv_power(state.insolation, cfg)
    if state.breaker is BreakerStatus.GRID_CONNECTED:
        p_bess = state.bess_setpoint_w
        if state.soc_pct <= 0.0 and p_bess > 0:
            p_bess = 0.0
        if state.soc_pct >= 100.0 and p_bess < 0:
            p_bess = 0.0
        p_grid = p_injected - p_pv - p_bess
    else:
        p_grid = 0.0
        p_bess = p_injected - p_pv
        if p_bess < 0 and state.soc_pct >= 100.0:
            p_pv = p_injected  # curtail: battery full, nowhere to send the surplus
            p_bess = 0.0
    return PowerFlow(p_bess, p_pv, p_grid, p_device, p_injected, v_load)


def step(state: PlantState, cfg: PlantConfig) -> PlantState:
    """Advance one plant step of dt_s, integrating the battery state of charge."""
    flow = power_flow(state, cfg)
    d_soc = (flow.p_bess_w * cfg.scale_factor * cfg.dt_s / 3600.0) \
        / cfg.bess_capacity_wh * 100.0
    soc = state.soc_pct - d_soc
    blackout = state.blackout
    if state.breaker is BreakerStatus.ISLANDED:
        if not blackout and flow.p_bess_w > 0 and soc <= 0.0:
            blackout = True  # battery empty, grid-forming source lost
    else:
        blackout = False  # grid restores the bus
    soc = min(100.0, max(0.0, soc))
    return replace(state, soc_pct=soc, t_s=state.t_s + cfg.dt_s, blackout=blackout)


def apply_command(state: PlantState, cmd: LoadCommand, cfg: PlantConfig) -> PlantState:
    """Apply a controllable-load command received from the control center."""
    override = None
    if cmd.ctrl_load_connect and cmd.setpoint_w != cfg.ctrl_load_w:
        override = cmd.setpoint_w
    return replace(state, ctrl_load_connected=cmd.ctrl_load_connect,
                   ctrl_load_w_override=override)


def set_breaker(state: PlantState, breaker: BreakerStatus) -> PlantState:
    """Driver-side breaker toggle (grid reconnection clears a blackout at the next step)."""
    return replace(state, breaker=breaker)


def sample_telemetry(state: PlantState, cfg: PlantConfig,
                     noise: Optional[NoiseSpec] = None,
                     rng: Optional[np.random.Generator] = None,
                     seq: int = 0,
                     include_soc: bool = True) -> TelemetryFrame:
    """Produce the telemetry frame for the current state.

    Called once per telemetry_period_s by the driver. PV/BESS values are
    already control-side here (the scaling lives in pv_power and the power
    balance); optional per-channel Gaussian noise is applied last.
    """
    flow = power_flow(state, cfg)
    values = [flow.p_bess_w, flow.p_pv_w, flow.p_grid_w,
              flow.p_load_total_w, flow.v_load_v]
    if noise is not None and noise.enabled:
        if rng is None:
            raise ConfigError("noise requires an rng")
        for k, sigma in enumerate(noise.sigmas):
            if sigma > 0:
                values[k] += rng.normal(0.0, sigma)
    return TelemetryFrame(
        seq=seq,
        t_ms=round(state.t_s * 1000.0),
        meas=MeasurementVector(*values),
        breaker_reported=state.breaker,
        soc_pct=state.soc_pct if include_soc else None,
    )
