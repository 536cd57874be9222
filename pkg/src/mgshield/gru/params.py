"""GRU weight container and persistence.

Two cell variants share one parameter shape:

  standard      candidate state sees [x_t, r_t * s_prev] (reset gate wired in)
  reset-bypass  candidate state sees [x_t, s_prev]; the reset gate is still
                computed, but its output never reaches the candidate, so its
                weights receive zero gradient and stay at initialization

Weight files are JSON with the normalization statistics embedded, so a model
file is sufficient to score raw measurement windows. A SHA-256 over the
canonical payload rejects corrupted or hand-edited files.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError
from ..plant import CHANNELS
from .dataset import NormStats

VARIANTS = ("standard", "reset-bypass")

FORMAT_NAME = "mgshield-gru-weights"
FORMAT_VERSION = 1

_WEIGHT_FIELDS = ("w_reset", "w_update", "w_cand", "b_reset", "b_update",
                  "b_cand", "w_out", "b_out")


@dataclass
class GruParams:
    """All trainable weights of the GRU + dense sigmoid head.

    Gate matrices act on the concatenation [x_t, s_prev] (input first), so
    their shape is (hidden, input + hidden). b_out is a plain float.
    """

    w_reset: np.ndarray
    w_update: np.ndarray
    w_cand: np.ndarray
    b_reset: np.ndarray
    b_update: np.ndarray
    b_cand: np.ndarray
    w_out: np.ndarray
    b_out: float
    variant: str = "standard"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        h, cat = self.w_reset.shape
        if cat <= h:
            raise ConfigError("gate matrices must be (hidden, input + hidden)")
        for name in ("w_update", "w_cand"):
            if getattr(self, name).shape != (h, cat):
                raise ConfigError(f"{name} shape {getattr(self, name).shape} != {(h, cat)}")
        for name in ("b_reset", "b_update", "b_cand", "w_out"):
            if getattr(self, name).shape != (h,):
                raise ConfigError(f"{name} shape {getattr(self, name).shape} != {(h,)}")
        for name in _WEIGHT_FIELDS[:-1]:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"{name} contains non-finite values")
        if not math.isfinite(self.b_out):
            raise ConfigError("b_out must be finite")

    @property
    def hidden_size(self) -> int:
        return self.w_reset.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_reset.shape[1] - self.w_reset.shape[0]

    @property
    def reset_in_candidate(self) -> bool:
        return self.variant == "standard"

    def to_arrays(self) -> dict:
        """Float64 array views keyed by field name; b_out becomes a 0-d array."""
        out = {name: np.asarray(getattr(self, name), dtype=np.float64)
               for name in _WEIGHT_FIELDS[:-1]}
        out["b_out"] = np.asarray(self.b_out, dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, variant: str) -> "GruParams":
        kw = {name: np.array(arrays[name], dtype=np.float64) for name in _WEIGHT_FIELDS[:-1]}
        return cls(b_out=float(arrays["b_out"]), variant=variant, **kw)


def init_params(input_size: int, hidden_size: int, rng: np.random.Generator,
                variant: str = "standard") -> GruParams:
    """Uniform weight init in ±sqrt(6 / (fan_in + fan_out)); all biases zero."""
    if input_size < 1 or hidden_size < 1:
        raise ConfigError("input_size and hidden_size must be >= 1")
    cat = input_size + hidden_size

    def glorot(fan_in, fan_out, shape):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    return GruParams(
        w_reset=glorot(cat, hidden_size, (hidden_size, cat)),
        w_update=glorot(cat, hidden_size, (hidden_size, cat)),
        w_cand=glorot(cat, hidden_size, (hidden_size, cat)),
        b_reset=np.zeros(hidden_size),
        b_update=np.zeros(hidden_size),
        b_cand=np.zeros(hidden_size),
        w_out=glorot(hidden_size, 1, (hidden_size,)),
        b_out=0.0,
        variant=variant,
    )


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def save_params(params: GruParams, stats: NormStats, path) -> None:
    """Write weights + normalization stats as checksummed JSON.

    json round-trips Python floats exactly (shortest-repr), so
    load_params(save_params(p)) reproduces every weight bit-for-bit.
    """
    payload = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "variant": params.variant,
        "input_size": params.input_size,
        "hidden_size": params.hidden_size,
        "channels": list(CHANNELS),
        "norm_mean": [float(v) for v in stats.mean],
        "norm_std": [float(v) for v in stats.std],
        "weights": {
            name: np.asarray(getattr(params, name)).tolist()
            for name in _WEIGHT_FIELDS
        },
    }
    payload["sha256"] = hashlib.sha256(_canonical(payload)).hexdigest()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_params(path) -> tuple:
    """Read a weight file; returns (GruParams, NormStats).

    Raises DataError on checksum, format, or dimension problems.
    """
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read weight file {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise DataError(f"{path} is not a {FORMAT_NAME} file")
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported weight format version {payload.get('format_version')!r}")
    stored = payload.pop("sha256", None)
    actual = hashlib.sha256(_canonical(payload)).hexdigest()
    if stored != actual:
        raise DataError(f"weight file checksum mismatch in {path}")
    try:
        weights = payload["weights"]
        arrays = {name: np.array(weights[name], dtype=np.float64)
                  for name in _WEIGHT_FIELDS[:-1]}
        arrays["b_out"] = np.float64(weights["b_out"])
        params = GruParams.from_arrays(arrays, payload["variant"])
        stats = NormStats(mean=np.array(payload["norm_mean"], dtype=np.float64),
                          std=np.array(payload["norm_std"], dtype=np.float64))
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise DataError(f"malformed weight file {path}: {exc}") from exc
    if params.input_size != payload["input_size"] or params.hidden_size != payload["hidden_size"]:
        raise DataError(f"weight dimensions disagree with header in {path}")
    if stats.mean.shape != (params.input_size,) or stats.std.shape != (params.input_size,):
        raise DataError(f"normalization stats have wrong length in {path}")
    return params, stats
