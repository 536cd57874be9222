"""Pure-numpy GRU sequence kernels (reference backend).

Both backends expose the same two functions with identical signatures and
semantics; the compiled backend exists only for speed. Shapes:

  x                 (B, T, I)   float64, C-contiguous
  gate matrices     (H, I + H)  act on the concatenation [x_t, s_prev]
  hs                (B, T+1, H) hidden states; hs[:, 0] is the zero start state
  r, z, c           (B, T, H)   reset gate, update gate, candidate state
  logit, prob       (B,)        dense head pre-activation / sigmoid output

reset_in_candidate selects the cell variant: True feeds the candidate
[x_t, r_t * s_prev] ("standard"), False feeds [x_t, s_prev] ("reset-bypass").
"""

from __future__ import annotations

import numpy as np

_CLIP = 500.0  # exp never overflows; sigmoid is exact to 1 ulp inside the clip


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-np.clip(a, -_CLIP, _CLIP)))


def sequence_forward(x, w_r, w_z, w_c, b_r, b_z, b_c, w_out, b_out,
                     reset_in_candidate):
    """Unroll the cell over a batch of sequences from the zero state.

    Returns (hs, r, z, c, logit, prob); everything a backward pass needs.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    B, T, I = x.shape
    H = b_r.shape[0]
    hs = np.zeros((B, T + 1, H))
    r = np.empty((B, T, H))
    z = np.empty((B, T, H))
    c = np.empty((B, T, H))
    for t in range(T):
        xt = x[:, t]
        s_prev = hs[:, t]
        u = np.concatenate([xt, s_prev], axis=1)
        rt = _sigmoid(u @ w_r.T + b_r)
        zt = _sigmoid(u @ w_z.T + b_z)
        if reset_in_candidate:
            v = np.concatenate([xt, rt * s_prev], axis=1)
        else:
            v = u
        ct = np.tanh(v @ w_c.T + b_c)
        hs[:, t + 1] = (1.0 - zt) * ct + zt * s_prev
        r[:, t] = rt
        z[:, t] = zt
        c[:, t] = ct
    logit = hs[:, T] @ w_out + float(b_out)
    prob = _sigmoid(logit)
    return hs, r, z, c, logit, prob


def sequence_backward(x, hs, r, z, c, prob, d_prob,
                      w_r, w_z, w_c, w_out, reset_in_candidate):
    """Backpropagation through time; exact gradients for all parameters.

    d_prob is dLoss/dprob per batch element. Returns a dict with one entry
    per parameter array (b_out is a 0-d array). In the reset-bypass variant
    the reset-gate weights never influence the loss, so their gradients are
    exactly zero.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    B, T, I = x.shape
    H = w_out.shape[0]

    d_logit = np.asarray(d_prob) * prob * (1.0 - prob)
    g_w_out = d_logit @ hs[:, T]
    g_b_out = d_logit.sum()
    d_s = np.outer(d_logit, w_out)

    g_w_r = np.zeros_like(w_r)
    g_w_z = np.zeros_like(w_z)
    g_w_c = np.zeros_like(w_c)
    g_b_r = np.zeros(H)
    g_b_z = np.zeros(H)
    g_b_c = np.zeros(H)

    for t in range(T - 1, -1, -1):
        xt = x[:, t]
        s_prev = hs[:, t]
        rt = r[:, t]
        zt = z[:, t]
        ct = c[:, t]
        u = np.concatenate([xt, s_prev], axis=1)

        d_a_z = d_s * (s_prev - ct) * zt * (1.0 - zt)
        d_a_c = d_s * (1.0 - zt) * (1.0 - ct * ct)
        d_s_prev = d_s * zt

        g_w_z += d_a_z.T @ u
        g_b_z += d_a_z.sum(axis=0)
        d_s_prev += d_a_z @ w_z[:, I:]

        if reset_in_candidate:
            v = np.concatenate([xt, rt * s_prev], axis=1)
        else:
            v = u
        g_w_c += d_a_c.T @ v
        g_b_c += d_a_c.sum(axis=0)
        d_vrec = d_a_c @ w_c[:, I:]

        if reset_in_candidate:
            d_s_prev += d_vrec * rt
            d_a_r = d_vrec * s_prev * rt * (1.0 - rt)
            g_w_r += d_a_r.T @ u
            g_b_r += d_a_r.sum(axis=0)
            d_s_prev += d_a_r @ w_r[:, I:]
        else:
            d_s_prev += d_vrec

        d_s = d_s_prev

    return {
        "w_reset": g_w_r, "w_update": g_w_z, "w_cand": g_w_c,
        "b_reset": g_b_r, "b_update": g_b_z, "b_cand": g_b_c,
        "w_out": g_w_out, "b_out": np.asarray(g_b_out),
    }
