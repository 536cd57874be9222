"""Control-center service: dispatch rule plus the breaker-status detector.

Per telemetry frame the service (1) tracks SoC, (2) lets the detector vet the
reported breaker status, and (3) runs the shed/reconnect rule on the vetted
status:

    shed the controllable load when islanded with SoC below 50%;
    reconnect it when grid-connected or SoC at/above 50%.

The detector compares its window-based estimate against the reported status.
A disagreement must persist for `debounce_frames` consecutive frames before
the service declares an attack and substitutes the estimate for the reported
value; while a disagreement is younger than that, the service defers
shed/reconnect decisions rather than acting on a status it cannot yet trust
(acting immediately on either value would let a single falsified frame
trigger a load action, which is exactly what mitigation exists to prevent).
The attack state clears after the same number of consecutive agreements.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, RuntimeFailure
from .gru.dataset import NormStats
from .gru.model import forward_sequence
from .gru.params import GruParams
from .plant import CHANNELS, BreakerStatus, LoadCommand, TelemetryFrame
from . import wire

EVENT_SHED = "Shed"
EVENT_RECONNECT = "Reconnect"
EVENT_ATTACK_DETECTED = "AttackDetected"
EVENT_ATTACK_CLEARED = "AttackCleared"
EVENT_MITIGATION_APPLIED = "MitigationApplied"
EVENT_BLACKOUT = "Blackout"

TRACE_HEADER = ("t_ms", "seq", *CHANNELS, "soc_pct", "breaker_reported",
                "breaker_estimated", "breaker_effective", "attack_flag")

_BLACKOUT_VOLTAGE_V = 1.0  # nominal is 120 V; below this the bus is dead


@dataclass(frozen=True)
class DmsConfig:
    seq_len: int = 10
    debounce_frames: int = 3
    soc_reconnect_threshold_pct: float = 50.0
    reconnect_setpoint_w: float = 800.0
    # local-integrator fallback for streams without in-band SoC
    bess_capacity_wh: float = 50000.0
    scale_factor: float = 100.0
    telemetry_period_s: float = 0.1
    initial_soc_pct: Optional[float] = None

    def __post_init__(self):
        if self.seq_len < 1 or self.debounce_frames < 1:
            raise ConfigError("seq_len and debounce_frames must be >= 1")
        if not 0.0 < self.soc_reconnect_threshold_pct <= 100.0:
            raise ConfigError("soc_reconnect_threshold_pct must be in (0, 100]")
        if self.reconnect_setpoint_w < 0:
            raise ConfigError("reconnect_setpoint_w must be >= 0")
        if self.bess_capacity_wh <= 0 or self.scale_factor <= 0 or self.telemetry_period_s <= 0:
            raise ConfigError("integrator parameters must be positive")
        if self.initial_soc_pct is not None and not 0.0 <= self.initial_soc_pct <= 100.0:
            raise ConfigError("initial_soc_pct must be within [0, 100]")


@dataclass(frozen=True)
class DmsEvent:
    t_ms: int
    kind: str
    detail: str = ""


@dataclass
class DmsState:
    meas_ring: deque
    believed_breaker: Optional[BreakerStatus] = None
    ctrl_load_commanded: bool = True
    soc_estimate_pct: Optional[float] = None
    detector_enabled: bool = True
    mismatch_streak: int = 0
    agreement_streak: int = 0
    attack_active: bool = False
    event_log: list = field(default_factory=list)
    decode_errors: int = 0
    blackout_active: bool = False

    def append_event(self, t_ms: int, kind: str, detail: str = "") -> None:
        if self.event_log and t_ms < self.event_log[-1].t_ms:
            raise RuntimeFailure("event log must be ordered by t_ms")
        self.event_log.append(DmsEvent(t_ms=t_ms, kind=kind, detail=detail))


class GruDetector:
    """Scores the raw measurement window with the trained classifier.

    Normalization uses the statistics stored in the weight file; dimension
    problems surface here, at construction, never mid-stream.
    """

    def __init__(self, params: GruParams, stats: NormStats, seq_len: int):
        if params.input_size != len(CHANNELS):
            raise ConfigError(
                f"model expects {params.input_size} channels, wire carries {len(CHANNELS)}")
        if stats.mean.shape != (len(CHANNELS),) or stats.std.shape != (len(CHANNELS),):
            raise ConfigError("normalization stats do not match the channel count")
        if not (np.all(np.isfinite(stats.mean)) and np.all(stats.std > 0)):
            raise ConfigError("normalization stats must be finite with positive std")
        self.params = params
        self.stats = stats
        self.seq_len = seq_len

    def estimate(self, window: np.ndarray) -> BreakerStatus:
        if window.shape != (self.seq_len, len(CHANNELS)):
            raise ConfigError(f"detector window has shape {window.shape}")
        prob = forward_sequence(self.stats.apply(window), self.params)
        return BreakerStatus.ISLANDED if prob >= 0.5 else BreakerStatus.GRID_CONNECTED


class OracleDetector:
    """Perfect detector: reads the true breaker status from a callback.

    Exists for mitigation-soundness checks — with this detector substituted
    for the trained model, command traces under attack must match the
    truthful-stream traces exactly.
    """

    def __init__(self, truth_fn):
        self._truth_fn = truth_fn

    def estimate(self, window) -> BreakerStatus:
        return BreakerStatus(int(self._truth_fn()))


class SocTracker:
    """Battery state-of-charge as seen by the control center.

    Prefers the in-band SoC field; falls back to integrating the reported
    BESS power over the telemetry period when a frame lacks it.
    """

    def __init__(self, cfg: DmsConfig):
        self._cfg = cfg
        self.soc_pct = cfg.initial_soc_pct

    def update(self, frame: TelemetryFrame) -> float:
        if frame.soc_pct is not None:
            self.soc_pct = float(min(100.0, max(0.0, frame.soc_pct)))
            return self.soc_pct
        if self.soc_pct is None:
            raise DataError("stream has no in-band SoC and no initial_soc_pct was configured")
        cfg = self._cfg
        drop = (frame.meas.p_bess_w * cfg.scale_factor * cfg.telemetry_period_s
                / 3600.0 / cfg.bess_capacity_wh * 100.0)
        self.soc_pct = float(min(100.0, max(0.0, self.soc_pct - drop)))
        return self.soc_pct


def soc_from_telemetry(frames, cfg: DmsConfig = None) -> float:
    """SoC after a sequence of frames (in-band when present, else integrated)."""
    if not frames:
        raise DataError("need at least one frame to estimate SoC")
    tracker = SocTracker(cfg if cfg is not None else DmsConfig())
    for frame in frames:
        soc = tracker.update(frame)
    return soc


@dataclass(frozen=True)
class MitigationOutcome:
    """effective=None means the status is in dispute and decisions pause."""

    effective: Optional[BreakerStatus]
    attack_flag: bool
    estimate: Optional[BreakerStatus]


def detect_and_mitigate(state: DmsState, frame: TelemetryFrame, detector,
                        cfg: DmsConfig) -> MitigationOutcome:
    """Vets the reported breaker status against the detector estimate.

    Pass-through (reported wins, flag false) while the detector is disabled
    or the measurement window is not yet full. Otherwise a debounced
    disagreement flips the service into the attacked state, where the
    estimate replaces the reported value until the stream agrees again for
    the same number of frames.
    """
    reported = frame.breaker_reported
    if not state.detector_enabled or detector is None:
        return MitigationOutcome(effective=reported, attack_flag=False, estimate=None)
    if len(state.meas_ring) < cfg.seq_len:
        return MitigationOutcome(effective=reported, attack_flag=False, estimate=None)

    window = np.asarray(state.meas_ring, dtype=np.float64)
    estimate = detector.estimate(window)

    if estimate == reported:
        state.mismatch_streak = 0
        if state.attack_active:
            state.agreement_streak += 1
            if state.agreement_streak >= cfg.debounce_frames:
                state.attack_active = False
                state.agreement_streak = 0
                state.append_event(frame.t_ms, EVENT_ATTACK_CLEARED,
                                   "reported status matches the estimate again")
        return MitigationOutcome(effective=reported,
                                 attack_flag=state.attack_active,
                                 estimate=estimate)

    # disagreement
    if state.attack_active:
        state.agreement_streak = 0
        return MitigationOutcome(effective=estimate, attack_flag=True, estimate=estimate)
    state.mismatch_streak += 1
    if state.mismatch_streak >= cfg.debounce_frames:
        state.attack_active = True
        state.agreement_streak = 0
        state.append_event(
            frame.t_ms, EVENT_ATTACK_DETECTED,
            f"reported {reported.name} vs estimated {estimate.name} "
            f"for {state.mismatch_streak} frames")
        state.append_event(frame.t_ms, EVENT_MITIGATION_APPLIED,
                           f"using estimated status {estimate.name}")
        return MitigationOutcome(effective=estimate, attack_flag=True, estimate=estimate)
    # young disagreement: neither value is trustworthy yet
    return MitigationOutcome(effective=None, attack_flag=False, estimate=estimate)


def dms_decide(state: DmsState, breaker_effective: BreakerStatus, soc_pct: float,
               cfg: DmsConfig, t_ms: int, seq: int) -> Optional[LoadCommand]:
    """Shed/reconnect rule on the post-mitigation status; idempotent."""
    threshold = cfg.soc_reconnect_threshold_pct
    if (breaker_effective is BreakerStatus.ISLANDED and soc_pct < threshold
            and state.ctrl_load_commanded):
        state.ctrl_load_commanded = False
        state.append_event(t_ms, EVENT_SHED,
                           f"islanded with SoC {soc_pct:.2f}% < {threshold:g}%")
        return LoadCommand(seq=seq, ctrl_load_connect=False, setpoint_w=0.0)
    if ((breaker_effective is BreakerStatus.GRID_CONNECTED or soc_pct >= threshold)
            and not state.ctrl_load_commanded):
        reason = ("grid reconnected" if breaker_effective is BreakerStatus.GRID_CONNECTED
                  else f"SoC {soc_pct:.2f}% >= {threshold:g}%")
        state.ctrl_load_commanded = True
        state.append_event(t_ms, EVENT_RECONNECT, reason)
        return LoadCommand(seq=seq, ctrl_load_connect=True,
                           setpoint_w=cfg.reconnect_setpoint_w)
    return None


@dataclass
class ServiceSummary:
    frames: int
    commands: int
    decode_errors: int
    events: list
    ended_by: str


class DmsService:
    """Frame-at-a-time control center over any byte channel.

    `detector=None` runs the plain dispatch rule (mitigation off).
    """

    def __init__(self, cfg: DmsConfig = None, detector=None,
                 ctrl_load_commanded: bool = True):
        self.cfg = cfg if cfg is not None else DmsConfig()
        self.detector = detector
        self.state = DmsState(meas_ring=deque(maxlen=self.cfg.seq_len),
                              ctrl_load_commanded=ctrl_load_commanded,
                              detector_enabled=detector is not None)
        self.soc_tracker = SocTracker(self.cfg)
        self.trace_rows = []
        self._cmd_seq = 0
        self._frames = 0
        self._commands = 0

    def handle_frame(self, frame: TelemetryFrame) -> Optional[LoadCommand]:
        state = self.state
        self._frames += 1
        state.meas_ring.append(frame.meas.as_array())
        soc = self.soc_tracker.update(frame)
        state.soc_estimate_pct = soc

        # a collapsed bus means unserved load, worth an event of its own
        if frame.meas.v_load_v < _BLACKOUT_VOLTAGE_V:
            if not state.blackout_active:
                state.blackout_active = True
                state.append_event(frame.t_ms, EVENT_BLACKOUT,
                                   "load bus voltage collapsed")
        else:
            state.blackout_active = False

        outcome = detect_and_mitigate(state, frame, self.detector, self.cfg)
        command = None
        if outcome.effective is not None:
            state.believed_breaker = outcome.effective
            command = dms_decide(state, outcome.effective, soc, self.cfg,
                                 frame.t_ms, self._cmd_seq)
            if command is not None:
                self._cmd_seq += 1
                self._commands += 1

        m = frame.meas
        self.trace_rows.append((
            frame.t_ms, frame.seq, m.p_bess_w, m.p_pv_w, m.p_grid_w,
            m.p_load_w, m.v_load_v, soc, int(frame.breaker_reported),
            -1 if outcome.estimate is None else int(outcome.estimate),
            -1 if state.believed_breaker is None else int(state.believed_breaker),
            int(outcome.attack_flag)))
        return command

    def handle_bytes(self, raw: bytes) -> Optional[LoadCommand]:
        """Decode one frame; payload defects are counted and skipped.

        Header defects are raised: without a sound header the stream can no
        longer be framed, so the session must fail fast.
        """
        try:
            frame = wire.decode_telemetry(raw)
        except (wire.BadMagic, wire.BadVersion, wire.BadType):
            raise
        except wire.WireError:
            self.state.decode_errors += 1
            return None
        return self.handle_frame(frame)

    def serve(self, telemetry_chan, command_chan=None, on_frame=None) -> ServiceSummary:
        """Consume a telemetry stream until it ends; commands go back out
        on command_chan when given.

        on_frame(command_or_None) fires after each frame is fully handled,
        i.e. after any command has been written — drivers use it to pace the
        plant against the service.
        """
        ended_by = "end-of-stream"
        while True:
            try:
                raw = wire.read_frame(telemetry_chan)
            except wire.TransportLoss:
                ended_by = "transport-loss"
                break
            if raw is None:
                break
            command = self.handle_bytes(raw)
            if command is not None and command_chan is not None:
                command_chan.write(wire.encode_command(command))
            if on_frame is not None:
                on_frame(command)
        return ServiceSummary(frames=self._frames, commands=self._commands,
                              decode_errors=self.state.decode_errors,
                              events=list(self.state.event_log), ended_by=ended_by)
