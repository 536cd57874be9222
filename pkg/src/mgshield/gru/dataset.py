"""Dataset generation for the breaker-status classifier.

Operating-point sweeps (defaults):

  grid-connected: PV 0..2400 W step 200 (13) x BESS setpoint 100..700 W
                  step 100 (7) -> 91 cases, label 0
  islanded:       PV 0..2490 W step 30 -> 84 cases, label 1

Each case runs the plant at its operating point with sensor noise, discards a
settle prefix, then slices overlapping windows of seq_len telemetry frames.
Every window inherits the case's true breaker status as its label. Islanded
cases run with the controllable load shed (the dispatch rule sheds below 50%
SoC and the fleet starts well under it); grid-connected cases carry the full
1400 W.

The CSV layout is one row per (case, window, frame): case_id, mode, window,
frameno, the five measurement channels, label. Floats are written with repr,
so a reloaded dataset is bit-identical to the generated one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError
from ..plant import (
    CHANNELS,
    BreakerStatus,
    NoiseSpec,
    PlantConfig,
    PlantState,
    sample_telemetry,
    step,
)

MODE_GRID = "grid"
MODE_ISLANDED = "islanded"


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics, fitted on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, windows: np.ndarray) -> "NormStats":
        """windows: (N, seq_len, channels). Constant channels get std 1."""
        flat = windows.reshape(-1, windows.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class SweepSpec:
    """Operating points to visit and how much telemetry to keep per case."""

    grid_pv_w: tuple = tuple(float(v) for v in range(0, 2401, 200))
    grid_bess_w: tuple = tuple(float(v) for v in range(100, 701, 100))
    islanded_pv_w: tuple = tuple(float(v) for v in range(0, 2491, 30))
    seq_len: int = 10
    windows_per_case: int = 8
    settle_frames: int = 5
    soc_start_pct: float = 35.0

    def __post_init__(self):
        if not (self.grid_pv_w or self.islanded_pv_w):
            raise ConfigError("sweep is empty: no operating points at all")
        if self.grid_pv_w and not self.grid_bess_w:
            raise ConfigError("grid-connected sweep needs at least one BESS setpoint")
        if self.seq_len < 1 or self.windows_per_case < 1 or self.settle_frames < 0:
            raise ConfigError("seq_len/windows_per_case must be >= 1, settle_frames >= 0")

    @property
    def frames_per_case(self) -> int:
        return self.settle_frames + self.seq_len + self.windows_per_case - 1

    def case_points(self):
        """Yield (case_id, mode, breaker, pv_w, bess_setpoint_w) in a fixed order."""
        for pv in self.grid_pv_w:
            for bess in self.grid_bess_w:
                yield (f"grid_pv{int(round(pv)):04d}_bess{int(round(bess)):03d}",
                       MODE_GRID, BreakerStatus.GRID_CONNECTED, pv, bess)
        for pv in self.islanded_pv_w:
            yield (f"isl_pv{int(round(pv)):04d}", MODE_ISLANDED,
                   BreakerStatus.ISLANDED, pv, 0.0)


@dataclass(frozen=True)
class DatasetCase:
    case_id: str
    mode: str
    label: int
    windows: np.ndarray  # (windows_per_case, seq_len, channels)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Dataset:
    cases: list = field(default_factory=list)

    def __len__(self):
        return len(self.cases)

    def labels(self):
        return [c.label for c in self.cases]

    def windows_matrix(self, cases=None):
        """Stack windows of the given cases: (N, seq_len, channels) and labels (N,)."""
        cases = self.cases if cases is None else cases
        if not cases:
            raise DataError("no cases to stack")
        x = np.concatenate([c.windows for c in cases], axis=0)
        y = np.concatenate([np.full(len(c.windows), c.label, dtype=np.float64)
                            for c in cases])
        return x, y

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "mode", "window", "frameno",
                             *CHANNELS, "label"])
            for case in self.cases:
                for w, window in enumerate(case.windows):
                    for f, row in enumerate(window):
                        writer.writerow([case.case_id, case.mode, w, f,
                                         *[repr(float(v)) for v in row], case.label])

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        try:
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header != ["case_id", "mode", "window", "frameno", *CHANNELS, "label"]:
                    raise DataError(f"unrecognized dataset header in {path}")
                rows = list(reader)
        except OSError as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from exc
        if not rows:
            raise DataError(f"dataset {path} has no rows")
        order = []  # case_ids in file order
        by_case = {}
        for row in rows:
            try:
                case_id, mode, w, f = row[0], row[1], int(row[2]), int(row[3])
                values = [float(v) for v in row[4:9]]
                label = int(row[9])
            except (IndexError, ValueError) as exc:
                raise DataError(f"malformed dataset row in {path}: {row!r}") from exc
            if case_id not in by_case:
                order.append(case_id)
                by_case[case_id] = {"mode": mode, "label": label, "frames": {}}
            rec = by_case[case_id]
            if rec["label"] != label or rec["mode"] != mode:
                raise DataError(f"case {case_id} has inconsistent mode/label in {path}")
            rec["frames"][(w, f)] = values

        out = cls()
        for case_id in order:
            rec = by_case[case_id]
            keys = sorted(rec["frames"])
            n_windows = keys[-1][0] + 1
            seq_len = keys[-1][1] + 1
            if len(keys) != n_windows * seq_len:
                raise DataError(f"case {case_id} is missing frames in {path}")
            arr = np.empty((n_windows, seq_len, len(CHANNELS)))
            for (w, f), values in rec["frames"].items():
                arr[w, f] = values
            out.cases.append(DatasetCase(case_id=case_id, mode=rec["mode"],
                                         label=rec["label"], windows=arr))
        return out


def generate_dataset(plant_cfg: PlantConfig, sweep: SweepSpec, seed: int,
                     noise: NoiseSpec = None) -> Dataset:
    """Run the plant over every sweep point and slice labeled windows.

    All randomness (sensor noise) flows from `seed`; the same seed yields a
    byte-identical dataset file.
    """
    if noise is None:
        noise = NoiseSpec.default_sensor()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dataset = Dataset()
    for case_id, mode, breaker, pv_w, bess_w in sweep.case_points():
        # insolation that makes the PV model emit pv_w control-side
        insolation = pv_w / 2500.0 * 1000.0
        state = PlantState(
            soc_pct=sweep.soc_start_pct,
            breaker=breaker,
            ctrl_load_connected=(mode == MODE_GRID),
            insolation=insolation,
            bess_setpoint_w=bess_w,
        )
        frames = []
        for seq in range(sweep.frames_per_case):
            for _ in range(plant_cfg.steps_per_frame):
                state = step(state, plant_cfg)
            frame = sample_telemetry(state, plant_cfg, noise=noise, rng=rng, seq=seq)
            frames.append(frame.meas.as_array())
        series = np.stack(frames[sweep.settle_frames:])
        windows = np.stack([series[i:i + sweep.seq_len]
                            for i in range(sweep.windows_per_case)])
        dataset.cases.append(DatasetCase(case_id=case_id, mode=mode,
                                         label=int(breaker), windows=windows))
    return dataset


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_cases(dataset: Dataset, train_fraction: float, rng: np.random.Generator):
    """Case-level stratified split; windows of one case never straddle the cut.

    Within each mode the cases are shuffled, then the first
    round_half_up(fraction * n) go to train. For the default 91 + 84 sweep at
    0.7 that is 64 + 59 = 123 train cases, 52 test.
    """
    if len(dataset) < 2:
        raise DataError("need at least two cases to split")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    train, test = [], []
    for mode in (MODE_GRID, MODE_ISLANDED):
        group = [c for c in dataset.cases if c.mode == mode]
        if not group:
            continue
        order = rng.permutation(len(group))
        n_train = _round_half_up(train_fraction * len(group))
        n_train = min(max(n_train, 1), len(group) - 1) if len(group) > 1 else n_train
        for rank, idx in enumerate(order):
            (train if rank < n_train else test).append(group[idx])
    if not test:
        raise DataError("split produced an empty test set")
    return train, test
