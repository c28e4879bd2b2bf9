# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel trace / select / blend and its reverse pass.

Signatures mirror ``gaussvol._core_py``; see that module for the math.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, erf, sqrt, log, INFINITY

cnp.import_array()

ctypedef cnp.int64_t i64

cdef double INV_SQRT2 = 0.70710678118654752440
cdef double INV_SQRT2PI = 0.39894228040143267794


cdef inline void _trace(const double[:, ::1] M, const double[:, :, ::1] A, i64 k,
                        double d0, double d1, double d2,
                        double* l, double* q, double* s) noexcept nogil:
    cdef double ad0 = A[k, 0, 0] * d0 + A[k, 0, 1] * d1 + A[k, 0, 2] * d2
    cdef double ad1 = A[k, 1, 0] * d0 + A[k, 1, 1] * d1 + A[k, 1, 2] * d2
    cdef double ad2 = A[k, 2, 0] * d0 + A[k, 2, 1] * d1 + A[k, 2, 2] * d2
    cdef double a = d0 * ad0 + d1 * ad1 + d2 * ad2
    cdef double b = M[k, 0] * ad0 + M[k, 1] * ad1 + M[k, 2] * ad2
    cdef double ll = b / a
    cdef double v0 = M[k, 0] - ll * d0
    cdef double v1 = M[k, 1] - ll * d1
    cdef double v2 = M[k, 2] - ll * d2
    cdef double quad = (v0 * (A[k, 0, 0] * v0 + A[k, 0, 1] * v1 + A[k, 0, 2] * v2)
                        + v1 * (A[k, 1, 0] * v0 + A[k, 1, 1] * v1 + A[k, 1, 2] * v2)
                        + v2 * (A[k, 2, 0] * v0 + A[k, 2, 1] * v1 + A[k, 2, 2] * v2))
    if quad < 0:
        quad = 0
    l[0] = ll
    q[0] = -0.5 * quad
    s[0] = 1.0 / sqrt(a)


def forward(const double[:, ::1] M, const double[:, :, ::1] A, const double[:, ::1] D,
            const i64[::1] pix_cell, const i64[::1] cell_ptr, const i64[::1] cell_idx,
            double eta, int kprime, double tau, int num_threads=1):
    cdef Py_ssize_t P = D.shape[0]
    idx_a = np.full((P, kprime), -1, dtype=np.int64)
    l_a = np.zeros((P, kprime))
    q_a = np.full((P, kprime), -INFINITY)
    s_a = np.ones((P, kprime))
    T_a = np.ones((P, kprime))
    W_a = np.zeros((P, kprime))
    n_a = np.zeros(P, dtype=np.int64)
    alpha_a = np.zeros(P)
    cdef i64[:, ::1] idx = idx_a
    cdef double[:, ::1] lo = l_a
    cdef double[:, ::1] qo = q_a
    cdef double[:, ::1] so = s_a
    cdef double[:, ::1] To = T_a
    cdef double[:, ::1] Wo = W_a
    cdef i64[::1] no = n_a
    cdef double[::1] alpha = alpha_a
    cdef double log_eta = log(eta)
    cdef Py_ssize_t p
    cdef i64 c, k, cell, n, pos, m, u
    cdef double ll, qq, ss, S, z, esum

    for p in prange(P, nogil=True, num_threads=num_threads, schedule="static"):
        cell = pix_cell[p]
        n = 0
        for c in range(cell_ptr[cell], cell_ptr[cell + 1]):
            k = cell_idx[c]
            _trace(M, A, k, D[p, 0], D[p, 1], D[p, 2], &ll, &qq, &ss)
            if not (qq > log_eta):
                continue
            # insertion into the K' nearest, ties keep the lower index first
            if n == kprime and not (ll < lo[p, n - 1]):
                continue
            if n < kprime:
                pos = n
                n = n + 1
            else:
                pos = kprime - 1
            while pos > 0 and lo[p, pos - 1] > ll:
                idx[p, pos] = idx[p, pos - 1]
                lo[p, pos] = lo[p, pos - 1]
                qo[p, pos] = qo[p, pos - 1]
                so[p, pos] = so[p, pos - 1]
                pos = pos - 1
            idx[p, pos] = k
            lo[p, pos] = ll
            qo[p, pos] = qq
            so[p, pos] = ss
        no[p] = n
        esum = 0
        for u in range(n):
            esum = esum + exp(qo[p, u])
            S = 0
            for m in range(n):
                z = (lo[p, u] - lo[p, m]) / so[p, m]
                S = S + exp(qo[p, m]) * 0.5 * (erf(z * INV_SQRT2) + 1.0)
            To[p, u] = exp(-tau * S)
            Wo[p, u] = To[p, u] * exp(qo[p, u])
        alpha[p] = 1.0 - exp(-tau * esum)
    return idx_a, l_a, q_a, s_a, T_a, W_a, n_a, alpha_a


def backward(const double[:, ::1] M, const double[:, :, ::1] A, const double[:, ::1] D,
             const i64[:, ::1] idx, const double[:, ::1] L, const double[:, ::1] Q,
             const double[:, ::1] Sg, const double[:, ::1] T, const double[:, ::1] W,
             const i64[::1] n_sel, const double[::1] alpha,
             const double[:, ::1] gW, const double[::1] galpha,
             double tau, bint use_T, bint use_rho, Py_ssize_t K):
    cdef Py_ssize_t P = D.shape[0]
    cdef Py_ssize_t kp = idx.shape[1]
    gM_a = np.zeros((K, 3))
    gA_a = np.zeros((K, 3, 3))
    cdef double[:, ::1] gM = gM_a
    cdef double[:, :, ::1] gA = gA_a
    ge_a = np.zeros(kp)
    gl_a = np.zeros(kp)
    gs_a = np.zeros(kp)
    cdef double[::1] ge = ge_a
    cdef double[::1] gl = gl_a
    cdef double[::1] gs = gs_a
    cdef Py_ssize_t p, u, m, i, j
    cdef i64 n, k
    cdef double gS, z, em, phi, Phi, dterm, galpha_term
    cdef double d0, d1, d2, a, b, ll, s, gq, ga, gb, gc, w0, w1, w2, m0, m1, m2

    with nogil:
        for p in range(P):
            n = n_sel[p]
            if n == 0:
                continue
            for u in range(n):
                ge[u] = 0
                gl[u] = 0
                gs[u] = 0
            for u in range(n):
                if gW[p, u] == 0:
                    continue
                if use_rho:
                    ge[u] += gW[p, u] * T[p, u]
                if use_T:
                    gS = -tau * W[p, u] * gW[p, u]
                    for m in range(n):
                        z = (L[p, u] - L[p, m]) / Sg[p, m]
                        em = exp(Q[p, m])
                        Phi = 0.5 * (erf(z * INV_SQRT2) + 1.0)
                        phi = INV_SQRT2PI * exp(-0.5 * z * z)
                        ge[m] += gS * Phi
                        dterm = gS * em * phi / Sg[p, m]
                        gl[u] += dterm
                        gl[m] -= dterm
                        gs[m] -= dterm * z
            if use_T and galpha[p] != 0:
                galpha_term = galpha[p] * tau * (1.0 - alpha[p])
                for u in range(n):
                    ge[u] += galpha_term
            d0 = D[p, 0]
            d1 = D[p, 1]
            d2 = D[p, 2]
            for u in range(n):
                k = idx[p, u]
                gq = ge[u] * exp(Q[p, u])
                ll = L[p, u]
                s = Sg[p, u]
                a = 1.0 / (s * s)
                b = ll * a
                ga = -0.5 * gs[u] * s * s * s - gl[u] * ll / a - 0.5 * gq * ll * ll
                gb = gl[u] / a + gq * ll
                gc = -0.5 * gq
                m0 = M[k, 0]
                m1 = M[k, 1]
                m2 = M[k, 2]
                w0 = gb * d0 + 2.0 * gc * m0
                w1 = gb * d1 + 2.0 * gc * m1
                w2 = gb * d2 + 2.0 * gc * m2
                gM[k, 0] += A[k, 0, 0] * w0 + A[k, 0, 1] * w1 + A[k, 0, 2] * w2
                gM[k, 1] += A[k, 1, 0] * w0 + A[k, 1, 1] * w1 + A[k, 1, 2] * w2
                gM[k, 2] += A[k, 2, 0] * w0 + A[k, 2, 1] * w1 + A[k, 2, 2] * w2
                for i in range(3):
                    for j in range(3):
                        gA[k, i, j] += (ga * D[p, i] * D[p, j]
                                        + 0.5 * gb * (D[p, i] * M[k, j] + M[k, i] * D[p, j])
                                        + gc * M[k, i] * M[k, j])
    return gM_a, gA_a
