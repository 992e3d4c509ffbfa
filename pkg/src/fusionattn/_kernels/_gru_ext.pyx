# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU recurrence: per-step BLAS gemm for the hidden projection, C loops for the gates.

Same contract as ``_gru_py``; inputs must be C-contiguous float64.
"""

import numpy as np

from libc.math cimport exp, tanh
from scipy.linalg.cython_blas cimport dgemm


cdef inline double _sig(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline void _gemm_rm(bint ta, bint tb, int M, int N, int K, double alpha,
                          const double* A, int lda, const double* B, int ldb,
                          double beta, double* C, int ldc) noexcept nogil:
    # row-major C(MxN) = alpha * op(A) @ op(B) + beta * C, via column-major C^T = op(B)^T op(A)^T
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    dgemm(&cb, &ca, &N, &M, &K, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


def gru_forward(xp_in, w_hh_in, b_hh_in, bint reverse=False):
    cdef double[:, :, ::1] xp = np.ascontiguousarray(xp_in, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(w_hh_in, dtype=np.float64)
    cdef double[::1] bh = np.ascontiguousarray(b_hh_in, dtype=np.float64)
    cdef Py_ssize_t B = xp.shape[0], T = xp.shape[1], H3 = xp.shape[2]
    cdef Py_ssize_t H = H3 // 3
    hs_a = np.zeros((B, T, H))
    r_a = np.empty((B, T, H))
    z_a = np.empty((B, T, H))
    n_a = np.empty((B, T, H))
    ghn_a = np.empty((B, T, H))
    gh_a = np.empty((B, H3))
    cdef double[:, :, ::1] hs = hs_a
    cdef double[:, :, ::1] r = r_a
    cdef double[:, :, ::1] z = z_a
    cdef double[:, :, ::1] n = n_a
    cdef double[:, :, ::1] ghn = ghn_a
    cdef double[:, ::1] gh = gh_a
    cdef Py_ssize_t s, t, tp, b, j
    cdef double rv, zv, nv, hp
    cdef int ld_hs = <int>(T * H)
    if B == 0 or T == 0:
        return hs_a, (r_a, z_a, n_a, ghn_a)
    with nogil:
        for s in range(T):
            t = T - 1 - s if reverse else s
            tp = t + 1 if reverse else t - 1
            for b in range(B):
                for j in range(H3):
                    gh[b, j] = bh[j]
            if s > 0:
                _gemm_rm(False, True, <int>B, <int>H3, <int>H, 1.0,
                         &hs[0, tp, 0], ld_hs, &w[0, 0], <int>H, 1.0, &gh[0, 0], <int>H3)
            for b in range(B):
                for j in range(H):
                    hp = hs[b, tp, j] if s > 0 else 0.0
                    rv = _sig(xp[b, t, j] + gh[b, j])
                    zv = _sig(xp[b, t, H + j] + gh[b, H + j])
                    nv = tanh(xp[b, t, 2 * H + j] + rv * gh[b, 2 * H + j])
                    r[b, t, j] = rv
                    z[b, t, j] = zv
                    n[b, t, j] = nv
                    ghn[b, t, j] = gh[b, 2 * H + j]
                    hs[b, t, j] = nv + zv * (hp - nv)
    return hs_a, (r_a, z_a, n_a, ghn_a)


def gru_backward(dhs_in, w_hh_in, hs_in, cache, bint reverse=False):
    r_in, z_in, n_in, ghn_in = cache
    cdef double[:, :, ::1] dhs = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(w_hh_in, dtype=np.float64)
    cdef double[:, :, ::1] hs = np.ascontiguousarray(hs_in, dtype=np.float64)
    cdef double[:, :, ::1] r = np.ascontiguousarray(r_in, dtype=np.float64)
    cdef double[:, :, ::1] z = np.ascontiguousarray(z_in, dtype=np.float64)
    cdef double[:, :, ::1] n = np.ascontiguousarray(n_in, dtype=np.float64)
    cdef double[:, :, ::1] ghn = np.ascontiguousarray(ghn_in, dtype=np.float64)
    cdef Py_ssize_t B = hs.shape[0], T = hs.shape[1], H = hs.shape[2]
    cdef Py_ssize_t H3 = 3 * H
    dxp_a = np.empty((B, T, H3))
    hprev_a = np.zeros((B, T, H))
    dgh_a = np.empty((B, T, H3))
    dh_a = np.empty((B, H))
    dnext_a = np.zeros((B, H))
    dw_a = np.zeros((H3, H))
    cdef double[:, :, ::1] dxp = dxp_a
    cdef double[:, :, ::1] hprev = hprev_a
    cdef double[:, :, ::1] dgh = dgh_a
    cdef double[:, ::1] dh = dh_a
    cdef double[:, ::1] dnext = dnext_a
    cdef double[:, ::1] dw = dw_a
    cdef Py_ssize_t s, t, tp, b, j
    cdef double d, rv, zv, nv, dn_pre, dz_pre, dr_pre
    cdef int ld_dgh = <int>(T * H3)
    if B == 0 or T == 0:
        return dxp_a, dw_a, np.zeros(H3)
    with nogil:
        for b in range(B):
            for t in range(T):
                tp = t + 1 if reverse else t - 1
                if 0 <= tp < T:
                    for j in range(H):
                        hprev[b, t, j] = hs[b, tp, j]
        for s in range(T):
            t = s if reverse else T - 1 - s
            for b in range(B):
                for j in range(H):
                    d = dhs[b, t, j] + dnext[b, j]
                    rv = r[b, t, j]
                    zv = z[b, t, j]
                    nv = n[b, t, j]
                    dn_pre = d * (1.0 - zv) * (1.0 - nv * nv)
                    dz_pre = d * (hprev[b, t, j] - nv) * zv * (1.0 - zv)
                    dr_pre = dn_pre * ghn[b, t, j] * rv * (1.0 - rv)
                    dxp[b, t, j] = dr_pre
                    dxp[b, t, H + j] = dz_pre
                    dxp[b, t, 2 * H + j] = dn_pre
                    dgh[b, t, j] = dr_pre
                    dgh[b, t, H + j] = dz_pre
                    dgh[b, t, 2 * H + j] = dn_pre * rv
                    dh[b, j] = d * zv
            # dnext = dh*z + dgh_t @ W_hh
            for b in range(B):
                for j in range(H):
                    dnext[b, j] = dh[b, j]
            _gemm_rm(False, False, <int>B, <int>H, <int>H3, 1.0,
                     &dgh[0, t, 0], ld_dgh, &w[0, 0], <int>H, 1.0, &dnext[0, 0], <int>H)
        # dW = sum_t dgh_t^T @ hprev_t over all (b, t)
        _gemm_rm(True, False, <int>H3, <int>H, <int>(B * T), 1.0,
                 &dgh[0, 0, 0], <int>H3, &hprev[0, 0, 0], <int>H, 0.0, &dw[0, 0], <int>H)
    db = dgh_a.reshape(B * T, H3).sum(axis=0)
    return dxp_a, dw_a, db
