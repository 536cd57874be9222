"""Minibatch BPTT training with Adam.

Defaults: MSE loss, lr 0.001, Adam(0.9, 0.999, 1e-8), 200 epochs, batch 32,
sequence length 10, hidden size 50, zero bias init, uniform Glorot weights.
All randomness (case split, weight init, batch shuffling) derives from the
single seed, so a rerun reproduces the final weights exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, RuntimeFailure
from . import kernels
from .dataset import Dataset, NormStats, split_cases
from .params import VARIANTS, GruParams, init_params

_PARAM_KEYS = ("w_reset", "w_update", "w_cand", "b_reset", "b_update",
               "b_cand", "w_out", "b_out")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 32
    seq_len: int = 10
    hidden_size: int = 50
    train_fraction: float = 0.7
    seed: int = 7
    variant: str = "standard"

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, arrays: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in arrays.items()},
                   v={k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(arrays: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to `arrays` in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for key in arrays:
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        arrays[key] -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainResult:
    params: GruParams
    stats: NormStats
    log: list
    train_case_ids: list
    test_case_ids: list

    @property
    def final_train_acc(self) -> float:
        return self.log[-1].train_acc

    @property
    def final_test_acc(self) -> float:
        return self.log[-1].test_acc


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((probs >= 0.5) == (labels >= 0.5)))


def _forward_probs(x, arrays, reset_in_candidate):
    return kernels.sequence_forward(
        x, arrays["w_reset"], arrays["w_update"], arrays["w_cand"],
        arrays["b_reset"], arrays["b_update"], arrays["b_cand"],
        arrays["w_out"], arrays["b_out"], reset_in_candidate)[5]


def train(dataset: Dataset, cfg: TrainConfig, log_fn=None) -> TrainResult:
    """Split, normalize, and fit; returns weights, stats, and the epoch log.

    log_fn, if given, receives each EpochLog as it is produced.
    """
    ss = np.random.SeedSequence(cfg.seed)
    split_rng, init_rng, shuffle_rng = (np.random.default_rng(s) for s in ss.spawn(3))

    train_cases, test_cases = split_cases(dataset, cfg.train_fraction, split_rng)
    x_train_raw, y_train = dataset.windows_matrix(train_cases)
    x_test_raw, y_test = dataset.windows_matrix(test_cases)
    if x_train_raw.shape[1] != cfg.seq_len:
        raise ConfigError(f"dataset windows are {x_train_raw.shape[1]} frames long, "
                          f"config expects {cfg.seq_len}")
    stats = NormStats.fit(x_train_raw)
    x_train = stats.apply(x_train_raw)
    x_test = stats.apply(x_test_raw)

    input_size = x_train.shape[2]
    params = init_params(input_size, cfg.hidden_size, init_rng, cfg.variant)
    arrays = params.to_arrays()
    adam = AdamState.zeros(arrays)
    ric = params.reset_in_candidate

    n = len(x_train)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sq_err_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb, yb = x_train[batch], y_train[batch]
            hs, r, z, c, _logit, probs = kernels.sequence_forward(
                xb, arrays["w_reset"], arrays["w_update"], arrays["w_cand"],
                arrays["b_reset"], arrays["b_update"], arrays["b_cand"],
                arrays["w_out"], arrays["b_out"], ric)
            err = probs - yb
            loss = float(np.mean(err * err))
            if not math.isfinite(loss):
                raise RuntimeFailure(
                    f"training loss diverged (epoch {epoch}, "
                    f"batch {start // cfg.batch_size})")
            sq_err_sum += loss * len(batch)
            grads = kernels.sequence_backward(
                xb, hs, r, z, c, probs, 2.0 * err / len(batch),
                arrays["w_reset"], arrays["w_update"], arrays["w_cand"],
                arrays["w_out"], ric)
            adam_step(arrays, grads, adam, cfg)
        train_probs = _forward_probs(x_train, arrays, ric)
        test_probs = _forward_probs(x_test, arrays, ric)
        row = EpochLog(epoch=epoch, loss=sq_err_sum / n,
                       train_acc=accuracy(train_probs, y_train),
                       test_acc=accuracy(test_probs, y_test))
        log.append(row)
        if log_fn is not None:
            log_fn(row)

    return TrainResult(params=GruParams.from_arrays(arrays, cfg.variant),
                       stats=stats, log=log,
                       train_case_ids=[c.case_id for c in train_cases],
                       test_case_ids=[c.case_id for c in test_cases])
