"""End-to-end runs: plant -> interceptor -> control center over the wire.

A scenario file pins the plant's starting point, the attack window, and the
run length; the engine wires the three components together over byte
channels, drives simulated time frame by frame, and writes the per-frame
truth, the control center's view, the event log, and a summary report.

Two transports produce identical behavior by construction: "memory" runs
all three components in one thread over in-memory channels, "tcp" runs the
control center and interceptor pumps on their own threads over loopback
sockets with the plant paced one frame at a time.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import wire
from .attack import AttackSpec, MitmProxy
from .dms import (DmsConfig, DmsService, EVENT_ATTACK_DETECTED, GruDetector,
                  OracleDetector, TRACE_HEADER)
from .errors import ConfigError, DataError
from .gru.params import load_params
from .plant import (BreakerStatus, NoiseSpec, PlantConfig, PlantState,
                    apply_command, power_flow, sample_telemetry, step)

import numpy as np
import yaml

PRESET_DIR = Path(__file__).parent / "scenarios"
OUT_DIR_ENV = "MGSHIELD_OUT_DIR"

TRUTH_HEADER = ("t_ms", "p_bess_w", "p_pv_w", "p_grid_w", "p_device_w",
                "p_load_total_w", "v_load_v", "soc_pct", "breaker",
                "blackout", "residual_w")

_BREAKER_NAMES = {
    "grid": BreakerStatus.GRID_CONNECTED,
    "grid_connected": BreakerStatus.GRID_CONNECTED,
    "grid-connected": BreakerStatus.GRID_CONNECTED,
    "0": BreakerStatus.GRID_CONNECTED,
    "islanded": BreakerStatus.ISLANDED,
    "1": BreakerStatus.ISLANDED,
}


def _parse_breaker(value) -> BreakerStatus:
    if isinstance(value, BreakerStatus):
        return value
    if isinstance(value, bool):
        raise ConfigError(f"breaker status must be a name or 0/1, not {value!r}")
    key = str(value).strip().lower()
    if key not in _BREAKER_NAMES:
        raise ConfigError(f"unknown breaker status {value!r}")
    return _BREAKER_NAMES[key]


@dataclass
class ScenarioConfig:
    """Declarative description of one run."""

    name: str
    description: str = ""
    duration_s: float = 60.0
    seed: int = 42
    initial_breaker: BreakerStatus = BreakerStatus.GRID_CONNECTED
    initial_soc_pct: float = 35.0
    insolation: float = 1000.0
    ctrl_load_connected: bool = True
    bess_setpoint_w: float = 0.0
    include_soc: bool = True
    sensor_noise: bool = False
    plant_overrides: dict = field(default_factory=dict)
    attack: AttackSpec = field(default_factory=AttackSpec)
    mitigation_enabled: bool = False
    model_path: Optional[str] = None
    out_dir: Optional[str] = None
    transport: str = "memory"

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be > 0")
        if self.transport not in ("memory", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        self.initial_breaker = _parse_breaker(self.initial_breaker)

    def plant_config(self) -> PlantConfig:
        return PlantConfig(**self.plant_overrides)

    def initial_state(self) -> PlantState:
        return PlantState(soc_pct=self.initial_soc_pct,
                          breaker=self.initial_breaker,
                          ctrl_load_connected=self.ctrl_load_connected,
                          insolation=self.insolation,
                          bess_setpoint_w=self.bess_setpoint_w)


_PLANT_KEYS = {"initial_breaker", "initial_soc_pct", "insolation",
               "ctrl_load_connected", "bess_setpoint_w", "include_soc",
               "sensor_noise", "overrides"}
_ATTACK_KEYS = {"mode", "forced_value", "start_ms", "end_ms"}
_TOP_KEYS = {"name", "description", "duration_s", "seed", "plant", "attack"}


def parse_scenario(doc: dict, fallback_name: str = "scenario") -> ScenarioConfig:
    """Build a ScenarioConfig from a parsed scenario document; strict keys."""
    if not isinstance(doc, dict):
        raise ConfigError("scenario file must hold a mapping at top level")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    plant = doc.get("plant", {}) or {}
    unknown = set(plant) - _PLANT_KEYS
    if unknown:
        raise ConfigError(f"unknown plant keys: {sorted(unknown)}")
    attack_doc = doc.get("attack", {}) or {}
    unknown = set(attack_doc) - _ATTACK_KEYS
    if unknown:
        raise ConfigError(f"unknown attack keys: {sorted(unknown)}")

    forced = attack_doc.get("forced_value")
    attack = AttackSpec(
        mode=str(attack_doc.get("mode", "none")),
        forced_value=None if forced is None else _parse_breaker(forced),
        start_ms=int(attack_doc.get("start_ms", 0)),
        end_ms=int(attack_doc.get("end_ms", 0)),
    )
    try:
        return ScenarioConfig(
            name=str(doc.get("name", fallback_name)),
            description=str(doc.get("description", "")),
            duration_s=float(doc.get("duration_s", 60.0)),
            seed=int(doc.get("seed", 42)),
            initial_breaker=_parse_breaker(plant.get("initial_breaker", "grid")),
            initial_soc_pct=float(plant.get("initial_soc_pct", 35.0)),
            insolation=float(plant.get("insolation", 1000.0)),
            ctrl_load_connected=bool(plant.get("ctrl_load_connected", True)),
            bess_setpoint_w=float(plant.get("bess_setpoint_w", 0.0)),
            include_soc=bool(plant.get("include_soc", True)),
            sensor_noise=bool(plant.get("sensor_noise", False)),
            plant_overrides=dict(plant.get("overrides", {}) or {}),
            attack=attack,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario value: {exc}") from exc


def available_presets() -> list:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


def load_scenario(name_or_path) -> ScenarioConfig:
    """Load a scenario by preset name or from a file path."""
    path = Path(name_or_path)
    if not path.is_file():
        candidate = PRESET_DIR / f"{name_or_path}.yaml"
        if candidate.is_file():
            path = candidate
        else:
            raise ConfigError(
                f"no scenario file {name_or_path!r}; presets: {available_presets()}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"cannot parse scenario file {path}: {exc}") from exc
    return parse_scenario(doc, fallback_name=path.stem)


@dataclass
class ScenarioReport:
    """Machine-readable outcome of one run; also written to report.json."""

    scenario: str
    mitigation_enabled: bool
    transport: str
    duration_s: float
    seed: int
    frames: int
    frames_falsified: int
    decode_errors: int
    commands: list
    events: list
    detection_latency_frames: Optional[int]
    final_load_w: float
    soc_start_pct: float
    soc_end_pct: float
    soc_min_pct: float
    soc_max_pct: float
    max_power_residual_w: float
    blackout_frames: int
    outputs: dict
    # in-memory copies for callers; the CSVs hold the same rows
    trace_rows: list = field(default_factory=list, repr=False)
    truth_rows: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("trace_rows")
        d.pop("truth_rows")
        return d


class _Driver:
    """Shared frame-by-frame mechanics for both transports."""

    def __init__(self, cfg: ScenarioConfig, detector):
        self.cfg = cfg
        self.pcfg = cfg.plant_config()
        self.state = cfg.initial_state()
        self.period_ms = round(self.pcfg.telemetry_period_s * 1000.0)
        self.n_frames = round(cfg.duration_s / self.pcfg.telemetry_period_s)
        self.noise = NoiseSpec.default_sensor() if cfg.sensor_noise else NoiseSpec.off()
        self.rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        self.proxy = MitmProxy(cfg.attack)
        self.truth_breaker = self.state.breaker
        if detector == "oracle":
            detector = OracleDetector(lambda: self.truth_breaker)
        self.dms = DmsService(
            DmsConfig(bess_capacity_wh=self.pcfg.bess_capacity_wh,
                      scale_factor=self.pcfg.scale_factor,
                      telemetry_period_s=self.pcfg.telemetry_period_s,
                      initial_soc_pct=cfg.initial_soc_pct),
            detector=detector,
            ctrl_load_commanded=cfg.ctrl_load_connected)
        self.pending = []
        self.commands = []
        self.truth_rows = []

    def tick_plant(self, i: int) -> bytes:
        """Apply queued commands, advance one frame of time, emit telemetry."""
        for cmd in self.pending:
            self.state = apply_command(self.state, cmd, self.pcfg)
        self.pending.clear()
        for _ in range(self.pcfg.steps_per_frame):
            self.state = step(self.state, self.pcfg)
        self.truth_breaker = self.state.breaker
        flow = power_flow(self.state, self.pcfg)
        residual = flow.p_grid_w + flow.p_pv_w + flow.p_bess_w - flow.p_load_total_w
        self.truth_rows.append((
            round(self.state.t_s * 1000.0), flow.p_bess_w, flow.p_pv_w,
            flow.p_grid_w, flow.p_device_w, flow.p_load_total_w, flow.v_load_v,
            self.state.soc_pct, int(self.state.breaker),
            int(self.state.blackout), residual))
        frame = sample_telemetry(self.state, self.pcfg, noise=self.noise,
                                 rng=self.rng, seq=i,
                                 include_soc=self.cfg.include_soc)
        return wire.encode_telemetry(frame)

    def take_command(self, raw: bytes, t_ms: int) -> None:
        cmd = wire.decode_command(raw)
        self.pending.append(cmd)
        self.commands.append({"t_ms": t_ms, "seq": cmd.seq,
                              "connect": cmd.ctrl_load_connect,
                              "setpoint_w": cmd.setpoint_w})


def _run_memory(drv: _Driver) -> None:
    plant_tx, proxy_rx = wire.MemoryChannel.pair()
    proxy_tx, dms_rx = wire.MemoryChannel.pair()
    dms_cmd_tx, plant_cmd_rx = wire.MemoryChannel.pair()
    for i in range(drv.n_frames):
        plant_tx.write(drv.tick_plant(i))
        raw = wire.read_frame(proxy_rx)
        proxy_tx.write(drv.proxy.process_telemetry(raw))
        seen = wire.read_frame(dms_rx)
        command = drv.dms.handle_bytes(seen)
        if command is not None:
            dms_cmd_tx.write(wire.encode_command(command))
            t_ms = (i + 1) * drv.period_ms
            drv.take_command(wire.read_frame(plant_cmd_rx), t_ms)
    plant_tx.close()
    proxy_tx.close()
    dms_cmd_tx.close()


_DONE = object()


def _run_tcp(drv: _Driver) -> None:
    """Same lockstep schedule, but the bytes cross loopback sockets and the
    interceptor and control center run on their own threads. The per-frame
    callback paces the plant so both transports see identical timelines."""
    q = queue.Queue()
    dms_listener = wire.TcpListener()
    plant_listener = wire.TcpListener()

    def dms_main():
        chan = dms_listener.accept()
        try:
            drv.dms.serve(chan, chan, on_frame=q.put)
        finally:
            q.put(_DONE)
            chan.close_both()

    dms_thread = threading.Thread(target=dms_main, daemon=True)
    dms_thread.start()
    proxy_dms_chan = wire.tcp_connect("127.0.0.1", dms_listener.port)

    accepted = {}

    def plant_accept():
        accepted["chan"] = plant_listener.accept()

    acceptor = threading.Thread(target=plant_accept, daemon=True)
    acceptor.start()
    plant_chan = wire.tcp_connect("127.0.0.1", plant_listener.port)
    acceptor.join(timeout=10.0)
    pumps = drv.proxy.run_threaded(accepted["chan"], proxy_dms_chan)

    try:
        for i in range(drv.n_frames):
            plant_chan.write(drv.tick_plant(i))
            item = q.get(timeout=30.0)
            if item is _DONE:
                raise wire.TransportLoss("control center ended early")
            if item is not None:
                # command bytes are on the wire; collect them from this side
                raw = wire.read_frame(plant_chan)
                if raw is None:
                    raise wire.TransportLoss("command stream ended early")
                drv.take_command(raw, (i + 1) * drv.period_ms)
        plant_chan.close()
        while q.get(timeout=30.0) is not _DONE:
            pass
    finally:
        dms_thread.join(timeout=10.0)
        for t in pumps:
            t.join(timeout=10.0)
        plant_chan.close_both()
        proxy_dms_chan.close_both()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def resolve_out_dir(cfg: ScenarioConfig) -> Path:
    if cfg.out_dir is not None:
        return Path(cfg.out_dir)
    base = Path(os.environ.get(OUT_DIR_ENV, "runs"))
    tag = "on" if cfg.mitigation_enabled else "off"
    return base / f"{cfg.name}_mitigation_{tag}"


def run_scenario(cfg: ScenarioConfig, detector=None,
                 write_outputs: bool = True) -> ScenarioReport:
    """Run one scenario end to end and write its outputs.

    `detector` overrides the model file: pass a detector object, or
    "oracle" for a perfect reference detector wired to the plant's true
    breaker status. By default, mitigation on loads the model from
    cfg.model_path; mitigation off runs the plain dispatch rule.
    """
    if detector is None and cfg.mitigation_enabled:
        if cfg.model_path is None:
            raise ConfigError("mitigation_enabled needs model_path (or a detector)")
        params, stats = load_params(cfg.model_path)
        detector = GruDetector(params, stats, seq_len=DmsConfig().seq_len)
    if not cfg.mitigation_enabled:
        detector = None

    drv = _Driver(cfg, detector)
    if cfg.transport == "memory":
        _run_memory(drv)
    else:
        _run_tcp(drv)

    events = [{"t_ms": e.t_ms, "kind": e.kind, "detail": e.detail}
              for e in drv.dms.state.event_log]
    latency = None
    if cfg.attack.mode != "none":
        for e in drv.dms.state.event_log:
            if e.kind == EVENT_ATTACK_DETECTED and e.t_ms >= cfg.attack.start_ms:
                latency = (e.t_ms - cfg.attack.start_ms) // drv.period_ms + 1
                break
    socs = [row[7] for row in drv.truth_rows]
    residual = max(abs(row[10]) for row in drv.truth_rows)

    outputs = {}
    report = ScenarioReport(
        scenario=cfg.name,
        mitigation_enabled=cfg.mitigation_enabled,
        transport=cfg.transport,
        duration_s=cfg.duration_s,
        seed=cfg.seed,
        frames=drv.n_frames,
        frames_falsified=drv.proxy.frames_falsified,
        decode_errors=drv.dms.state.decode_errors,
        commands=drv.commands,
        events=events,
        detection_latency_frames=latency,
        final_load_w=drv.truth_rows[-1][4],
        soc_start_pct=cfg.initial_soc_pct,
        soc_end_pct=socs[-1],
        soc_min_pct=min(socs),
        soc_max_pct=max(socs),
        max_power_residual_w=residual,
        blackout_frames=sum(row[9] for row in drv.truth_rows),
        outputs=outputs,
        trace_rows=list(drv.dms.trace_rows),
        truth_rows=list(drv.truth_rows),
    )

    if write_outputs:
        out = resolve_out_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "trace.csv", TRACE_HEADER, drv.dms.trace_rows)
        _write_csv(out / "truth.csv", TRUTH_HEADER, drv.truth_rows)
        _write_csv(out / "events.csv", ("t_ms", "kind", "detail"),
                   [(e["t_ms"], e["kind"], e["detail"]) for e in events])
        outputs.update(trace_csv=str(out / "trace.csv"),
                       truth_csv=str(out / "truth.csv"),
                       events_csv=str(out / "events.csv"),
                       report_json=str(out / "report.json"))
        with open(out / "report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    return report
