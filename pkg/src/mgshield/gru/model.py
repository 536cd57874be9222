"""Cell- and sequence-level APIs over the kernel backends.

cell_forward is the readable single-step reference used by the unit tests;
the batched paths go through the selected kernel backend so training and
inference share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from . import kernels
from .params import GruParams

_CLIP = 500.0


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-np.clip(a, -_CLIP, _CLIP)))


@dataclass(frozen=True)
class CellCache:
    """Everything the backward pass needs about one forward step."""

    x: np.ndarray
    s_prev: np.ndarray
    reset: np.ndarray
    update: np.ndarray
    cand: np.ndarray


def cell_forward(x_t, s_prev, params: GruParams):
    """One recurrence step; returns (s_t, cache).

    reset = sigmoid(w_reset . [x, s_prev] + b_reset)
    update = sigmoid(w_update . [x, s_prev] + b_update)
    cand = tanh(w_cand . [x, reset * s_prev] + b_cand)   (standard)
         = tanh(w_cand . [x, s_prev] + b_cand)           (reset-bypass)
    s_t = (1 - update) * cand + update * s_prev
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    s_prev = np.asarray(s_prev, dtype=np.float64)
    if x_t.shape != (params.input_size,):
        raise ConfigError(f"input has shape {x_t.shape}, expected ({params.input_size},)")
    if s_prev.shape != (params.hidden_size,):
        raise ConfigError(f"state has shape {s_prev.shape}, expected ({params.hidden_size},)")
    u = np.concatenate([x_t, s_prev])
    reset = _sigmoid(params.w_reset @ u + params.b_reset)
    update = _sigmoid(params.w_update @ u + params.b_update)
    if params.reset_in_candidate:
        v = np.concatenate([x_t, reset * s_prev])
    else:
        v = u
    cand = np.tanh(params.w_cand @ v + params.b_cand)
    s_t = (1.0 - update) * cand + update * s_prev
    return s_t, CellCache(x=x_t, s_prev=s_prev, reset=reset, update=update, cand=cand)


def _kernel_args(params: GruParams):
    return (params.w_reset, params.w_update, params.w_cand,
            params.b_reset, params.b_update, params.b_cand,
            params.w_out, params.b_out, params.reset_in_candidate)


def _check_batch(x, params):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != params.input_size:
        raise ConfigError(f"batch has shape {x.shape}, expected (B, T, {params.input_size})")
    return x


def forward_batch(x, params: GruParams) -> np.ndarray:
    """Probabilities for a batch of normalized windows, shape (B, T, input)."""
    x = _check_batch(x, params)
    return kernels.sequence_forward(x, *_kernel_args(params))[5]


def forward_sequence(window, params: GruParams) -> float:
    """Probability (breaker islanded) for one normalized window (T, input)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ConfigError(f"window must be 2-D, got shape {window.shape}")
    return float(forward_batch(window[np.newaxis], params)[0])


def sequence_gradients(x, y, params: GruParams):
    """Mean-squared-error loss and its exact parameter gradients for a batch.

    Returns (loss, probs, grads) where grads is a dict keyed like
    GruParams.to_arrays(). Gradients come from backpropagation through time
    across every step of every sequence.
    """
    x = _check_batch(x, params)
    y = np.asarray(y, dtype=np.float64)
    hs, r, z, c, _logit, prob = kernels.sequence_forward(x, *_kernel_args(params))
    err = prob - y
    loss = float(np.mean(err * err))
    d_prob = 2.0 * err / x.shape[0]
    grads = kernels.sequence_backward(
        x, hs, r, z, c, prob, d_prob,
        params.w_reset, params.w_update, params.w_cand, params.w_out,
        params.reset_in_candidate)
    return loss, prob, grads
