# cython: language_level=3
"""Compiled GRU sequence kernels.

Same contract as _kernels_py (see its docstring for shapes); plain C loops
over typed memoryviews, no BLAS. At this model size (hidden 50, batch 32)
call overhead dominates the numpy backend, so straight loops win.
"""

import numpy as np

from libc.math cimport exp, tanh


cdef inline double _sig(double a) noexcept nogil:
    if a > 500.0:
        a = 500.0
    elif a < -500.0:
        a = -500.0
    return 1.0 / (1.0 + exp(-a))


def sequence_forward(x, w_r, w_z, w_c, b_r, b_z, b_c, w_out, b_out,
                     reset_in_candidate):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] wr = np.ascontiguousarray(w_r, dtype=np.float64)
    cdef double[:, ::1] wz = np.ascontiguousarray(w_z, dtype=np.float64)
    cdef double[:, ::1] wc = np.ascontiguousarray(w_c, dtype=np.float64)
    cdef double[::1] br = np.ascontiguousarray(b_r, dtype=np.float64)
    cdef double[::1] bz = np.ascontiguousarray(b_z, dtype=np.float64)
    cdef double[::1] bc = np.ascontiguousarray(b_c, dtype=np.float64)
    cdef double[::1] wo = np.ascontiguousarray(w_out, dtype=np.float64)
    cdef double bo = float(b_out)
    cdef bint ric = bool(reset_in_candidate)

    cdef Py_ssize_t B = xv.shape[0], T = xv.shape[1], I = xv.shape[2]
    cdef Py_ssize_t H = wr.shape[0]

    hs_arr = np.zeros((B, T + 1, H))
    r_arr = np.empty((B, T, H))
    z_arr = np.empty((B, T, H))
    c_arr = np.empty((B, T, H))
    logit_arr = np.empty(B)
    prob_arr = np.empty(B)
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] r = r_arr
    cdef double[:, :, ::1] z = z_arr
    cdef double[:, :, ::1] c = c_arr
    cdef double[::1] logit = logit_arr
    cdef double[::1] prob = prob_arr

    cdef Py_ssize_t b, t, j, i, k
    cdef double acc_r, acc_z, acc_c, acc

    with nogil:
        for b in range(B):
            for t in range(T):
                for j in range(H):
                    acc_r = br[j]
                    acc_z = bz[j]
                    for i in range(I):
                        acc_r += wr[j, i] * xv[b, t, i]
                        acc_z += wz[j, i] * xv[b, t, i]
                    for k in range(H):
                        acc_r += wr[j, I + k] * hs[b, t, k]
                        acc_z += wz[j, I + k] * hs[b, t, k]
                    r[b, t, j] = _sig(acc_r)
                    z[b, t, j] = _sig(acc_z)
                for j in range(H):
                    acc_c = bc[j]
                    for i in range(I):
                        acc_c += wc[j, i] * xv[b, t, i]
                    if ric:
                        for k in range(H):
                            acc_c += wc[j, I + k] * (r[b, t, k] * hs[b, t, k])
                    else:
                        for k in range(H):
                            acc_c += wc[j, I + k] * hs[b, t, k]
                    c[b, t, j] = tanh(acc_c)
                for j in range(H):
                    hs[b, t + 1, j] = ((1.0 - z[b, t, j]) * c[b, t, j]
                                       + z[b, t, j] * hs[b, t, j])
            acc = bo
            for j in range(H):
                acc += wo[j] * hs[b, T, j]
            logit[b] = acc
            prob[b] = _sig(acc)

    return hs_arr, r_arr, z_arr, c_arr, logit_arr, prob_arr


def sequence_backward(x, hs, r, z, c, prob, d_prob,
                      w_r, w_z, w_c, w_out, reset_in_candidate):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, ::1] hsv = np.ascontiguousarray(hs, dtype=np.float64)
    cdef double[:, :, ::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef double[:, :, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, :, ::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[::1] probv = np.ascontiguousarray(prob, dtype=np.float64)
    cdef double[::1] dprobv = np.ascontiguousarray(d_prob, dtype=np.float64)
    cdef double[:, ::1] wr = np.ascontiguousarray(w_r, dtype=np.float64)
    cdef double[:, ::1] wz = np.ascontiguousarray(w_z, dtype=np.float64)
    cdef double[:, ::1] wc = np.ascontiguousarray(w_c, dtype=np.float64)
    cdef double[::1] wo = np.ascontiguousarray(w_out, dtype=np.float64)
    cdef bint ric = bool(reset_in_candidate)

    cdef Py_ssize_t B = xv.shape[0], T = xv.shape[1], I = xv.shape[2]
    cdef Py_ssize_t H = wo.shape[0]

    g_w_r_arr = np.zeros((H, I + H))
    g_w_z_arr = np.zeros((H, I + H))
    g_w_c_arr = np.zeros((H, I + H))
    g_b_r_arr = np.zeros(H)
    g_b_z_arr = np.zeros(H)
    g_b_c_arr = np.zeros(H)
    g_w_out_arr = np.zeros(H)
    cdef double[:, ::1] g_w_r = g_w_r_arr
    cdef double[:, ::1] g_w_z = g_w_z_arr
    cdef double[:, ::1] g_w_c = g_w_c_arr
    cdef double[::1] g_b_r = g_b_r_arr
    cdef double[::1] g_b_z = g_b_z_arr
    cdef double[::1] g_b_c = g_b_c_arr
    cdef double[::1] g_w_out = g_w_out_arr
    cdef double g_b_out = 0.0

    scratch = np.empty((6, H))
    cdef double[:, ::1] s6 = scratch
    cdef double[::1] d_s = s6[0]
    cdef double[::1] d_s_new = s6[1]
    cdef double[::1] d_a_z = s6[2]
    cdef double[::1] d_a_c = s6[3]
    cdef double[::1] d_a_r = s6[4]
    cdef double[::1] d_vrec = s6[5]

    cdef Py_ssize_t b, t, j, i, k
    cdef double d_logit, zt, ct, daz, dac, dar, acc

    with nogil:
        for b in range(B):
            d_logit = dprobv[b] * probv[b] * (1.0 - probv[b])
            g_b_out += d_logit
            for j in range(H):
                g_w_out[j] += d_logit * hsv[b, T, j]
                d_s[j] = d_logit * wo[j]
            for t in range(T - 1, -1, -1):
                for j in range(H):
                    zt = zv[b, t, j]
                    ct = cv[b, t, j]
                    d_a_z[j] = d_s[j] * (hsv[b, t, j] - ct) * zt * (1.0 - zt)
                    d_a_c[j] = d_s[j] * (1.0 - zt) * (1.0 - ct * ct)
                    d_s_new[j] = d_s[j] * zt
                for j in range(H):
                    daz = d_a_z[j]
                    g_b_z[j] += daz
                    for i in range(I):
                        g_w_z[j, i] += daz * xv[b, t, i]
                    for k in range(H):
                        g_w_z[j, I + k] += daz * hsv[b, t, k]
                for k in range(H):
                    acc = 0.0
                    for j in range(H):
                        acc += d_a_z[j] * wz[j, I + k]
                    d_s_new[k] += acc
                for j in range(H):
                    dac = d_a_c[j]
                    g_b_c[j] += dac
                    for i in range(I):
                        g_w_c[j, i] += dac * xv[b, t, i]
                    if ric:
                        for k in range(H):
                            g_w_c[j, I + k] += dac * (rv[b, t, k] * hsv[b, t, k])
                    else:
                        for k in range(H):
                            g_w_c[j, I + k] += dac * hsv[b, t, k]
                for k in range(H):
                    acc = 0.0
                    for j in range(H):
                        acc += d_a_c[j] * wc[j, I + k]
                    d_vrec[k] = acc
                if ric:
                    for k in range(H):
                        d_s_new[k] += d_vrec[k] * rv[b, t, k]
                        d_a_r[k] = (d_vrec[k] * hsv[b, t, k]
                                    * rv[b, t, k] * (1.0 - rv[b, t, k]))
                    for j in range(H):
                        dar = d_a_r[j]
                        g_b_r[j] += dar
                        for i in range(I):
                            g_w_r[j, i] += dar * xv[b, t, i]
                        for k in range(H):
                            g_w_r[j, I + k] += dar * hsv[b, t, k]
                    for k in range(H):
                        acc = 0.0
                        for j in range(H):
                            acc += d_a_r[j] * wr[j, I + k]
                        d_s_new[k] += acc
                else:
                    for k in range(H):
                        d_s_new[k] += d_vrec[k]
                for j in range(H):
                    d_s[j] = d_s_new[j]

    return {
        "w_reset": g_w_r_arr, "w_update": g_w_z_arr, "w_cand": g_w_c_arr,
        "b_reset": g_b_r_arr, "b_update": g_b_z_arr, "b_cand": g_b_c_arr,
        "w_out": g_w_out_arr, "b_out": np.asarray(g_b_out),
    }
