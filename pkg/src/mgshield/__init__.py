"""Software microgrid cybersecurity testbed.

A discrete-time inverter-based microgrid plant streams telemetry over a
binary wire protocol, an optional man-in-the-middle proxy falsifies the
grid-breaker status in transit, and a control-center service detects and
mitigates the falsification with a from-scratch GRU classifier.
"""

__version__ = "0.1.0"

from .plant import (  # noqa: F401
    BreakerStatus,
    LoadCommand,
    MeasurementVector,
    NoiseSpec,
    PlantConfig,
    PlantState,
    TelemetryFrame,
)
