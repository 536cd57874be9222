"""Man-in-the-middle falsification of the telemetry stream.

The attacker sits between plant and control center and rewrites the breaker
status byte of telemetry frames inside a time window, recomputing the
checksum so the forgery passes integrity checks downstream. Measurements,
sequence numbers, and the in-band SoC are forwarded untouched — the attack
is a lie about topology, not about the analog values. Commands flow back
unmodified.
"""

from __future__ import annotations

import dataclasses
import threading
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError
from .plant import BreakerStatus
from . import wire

MODE_NONE = "none"
MODE_FORCE = "force"
MODE_FLIP = "flip"
MODES = (MODE_NONE, MODE_FORCE, MODE_FLIP)


@dataclass(frozen=True)
class AttackSpec:
    """What to do to the breaker byte, and when.

    The window is half-open: frames with start_ms <= t_ms < end_ms are
    falsified. `forced_value` is required for mode "force".
    """

    mode: str = MODE_NONE
    forced_value: Optional[BreakerStatus] = None
    start_ms: int = 0
    end_ms: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}; pick one of {MODES}")
        if self.mode == MODE_FORCE:
            if self.forced_value is None:
                raise ConfigError("attack mode 'force' needs forced_value")
            object.__setattr__(self, "forced_value", BreakerStatus(self.forced_value))
        if self.mode != MODE_NONE and self.start_ms >= self.end_ms:
            raise ConfigError("attack window needs start_ms < end_ms")

    def active_at(self, t_ms: int) -> bool:
        return self.mode != MODE_NONE and self.start_ms <= t_ms < self.end_ms


def falsify(raw: bytes, spec: AttackSpec) -> bytes:
    """Rewrite one encoded telemetry frame as the attack spec directs.

    Anything that does not decode as telemetry (corruption, command frames)
    is forwarded verbatim — a real interceptor cannot rewrite what it cannot
    parse, and dropping bytes would reveal its presence. Frames outside the
    window, and frames already showing the target status, also pass through
    bit-identical.
    """
    if spec.mode == MODE_NONE:
        return raw
    try:
        frame = wire.decode_telemetry(raw)
    except wire.WireError:
        return raw
    if not spec.active_at(frame.t_ms):
        return raw
    if spec.mode == MODE_FORCE:
        new_status = spec.forced_value
    else:
        new_status = (BreakerStatus.GRID_CONNECTED
                      if frame.breaker_reported is BreakerStatus.ISLANDED
                      else BreakerStatus.ISLANDED)
    if new_status == frame.breaker_reported:
        return raw
    forged = dataclasses.replace(frame, breaker_reported=new_status)
    return wire.encode_telemetry(forged)


class MitmProxy:
    """Pumps frames between two channels, falsifying the telemetry leg."""

    def __init__(self, spec: AttackSpec):
        self.spec = spec
        self.frames_seen = 0
        self.frames_falsified = 0

    def process_telemetry(self, raw: bytes) -> bytes:
        self.frames_seen += 1
        out = falsify(raw, self.spec)
        if out is not raw:
            self.frames_falsified += 1
        return out

    def pump_telemetry(self, upstream, downstream) -> int:
        """plant -> control center; returns frames forwarded."""
        n = 0
        while True:
            try:
                raw = wire.read_frame(upstream)
            except wire.TransportLoss:
                break
            if raw is None:
                break
            downstream.write(self.process_telemetry(raw))
            n += 1
        try:
            downstream.close()
        except OSError:
            pass
        return n

    def pump_commands(self, upstream, downstream) -> int:
        """control center -> plant; verbatim passthrough."""
        n = 0
        while True:
            try:
                raw = wire.read_frame(upstream)
            except wire.TransportLoss:
                break
            if raw is None:
                break
            downstream.write(raw)
            n += 1
        try:
            downstream.close()
        except OSError:
            pass
        return n

    def run_threaded(self, plant_side, dms_side) -> tuple:
        """Pump both directions on daemon threads; returns (t_tel, t_cmd)
        for the caller to join."""
        t_tel = threading.Thread(target=self.pump_telemetry,
                                 args=(plant_side, dms_side), daemon=True)
        t_cmd = threading.Thread(target=self.pump_commands,
                                 args=(dms_side, plant_side), daemon=True)
        t_tel.start()
        t_cmd.start()
        return t_tel, t_cmd
