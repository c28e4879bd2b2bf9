"""NumPy implementation of the per-pixel kernels.

Used when the compiled ``_core`` extension is unavailable.  Each pixel ray
``D`` (unit, camera frame) sees kernel ``k`` as a 1D Gaussian with

    a = D' A D,   l = D' A M / a,   q = -(M - l D)' A (M - l D) / 2,   s = a**-0.5

Kernels with ``q > log(eta)`` are kept, the ``kprime`` smallest ``l`` survive
(ties resolved toward the lower kernel index), and each survivor gets the
weight ``W = T(l) exp(q)`` with

    T(t) = exp(-tau * sum_m exp(q_m) * Phi((t - l_m) / s_m))

where ``Phi`` is the standard normal CDF.
"""

import numpy as np
from scipy.special import erf, ndtr

_INV_SQRT2PI = 0.3989422804014327
_CHUNK = 1 << 21


def _trace_block(M, A, D):
    """Trace rays ``D`` (m, 3) against kernels ``M, A``; returns (m, n) arrays."""
    AD = np.einsum("kij,pj->pki", A, D)
    a = np.einsum("pj,pkj->pk", D, AD)
    b = np.einsum("kj,pkj->pk", M, AD)
    l = b / a
    V = M[None, :, :] - l[:, :, None] * D[:, None, :]
    quad = np.einsum("pki,kij,pkj->pk", V, A, V)
    np.maximum(quad, 0.0, out=quad)
    return l, -0.5 * quad, 1.0 / np.sqrt(a)


def _blend_rows(l, q, s, n, tau):
    kp = l.shape[1]
    live = np.arange(kp)[None, :] < n[:, None]
    e = np.where(live, np.exp(q), 0.0)
    z = (l[:, :, None] - l[:, None, :]) / s[:, None, :]
    S = np.einsum("pm,pum->pu", e, ndtr(z))
    T = np.where(live, np.exp(-tau * S), 1.0)
    W = T * e
    alpha = 1.0 - np.exp(-tau * e.sum(axis=1))
    return T, W, alpha


def forward(M, A, D, pix_cell, cell_ptr, cell_idx, eta, kprime, tau, num_threads=1):
    P = D.shape[0]
    idx = np.full((P, kprime), -1, dtype=np.int64)
    L = np.zeros((P, kprime))
    Q = np.full((P, kprime), -np.inf)
    S = np.ones((P, kprime))
    n_sel = np.zeros(P, dtype=np.int64)
    log_eta = np.log(eta)
    order = np.argsort(pix_cell, kind="stable")
    cells, starts = np.unique(pix_cell[order], return_index=True)
    bounds = np.append(starts, P)
    for ci, cell in enumerate(cells):
        pix_all = order[bounds[ci]:bounds[ci + 1]]
        cand = cell_idx[cell_ptr[cell]:cell_ptr[cell + 1]]
        if cand.size == 0:
            continue
        step = max(1, _CHUNK // (9 * cand.size))
        for s0 in range(0, pix_all.size, step):
            pix = pix_all[s0:s0 + step]
            l, q, s = _trace_block(M[cand], A[cand], D[pix])
            keep = q > log_eta
            key = np.where(keep, l, np.inf)
            top = np.argsort(key, axis=1, kind="stable")[:, :kprime]
            rows = np.arange(pix.size)[:, None]
            ok = keep[rows, top]
            m = top.shape[1]
            n_sel[pix] = ok.sum(axis=1)
            idx[pix, :m] = np.where(ok, cand[top], -1)
            L[pix, :m] = np.where(ok, l[rows, top], 0.0)
            Q[pix, :m] = np.where(ok, q[rows, top], -np.inf)
            S[pix, :m] = np.where(ok, s[rows, top], 1.0)
    T, W, alpha = _blend_rows(L, Q, S, n_sel, tau)
    return idx, L, Q, S, T, W, n_sel, alpha


def backward(M, A, D, idx, L, Q, Sg, T, W, n_sel, alpha, gW, galpha, tau, use_T, use_rho, K):
    P, kp = idx.shape
    gM = np.zeros((K, 3))
    gA = np.zeros((K, 3, 3))
    step = max(1, _CHUNK // (kp * kp + 1))
    for p0 in range(0, P, step):
        sl = slice(p0, p0 + step)
        live = idx[sl] >= 0
        if not live.any():
            continue
        l, s, q = L[sl], Sg[sl], Q[sl]
        e = np.where(live, np.exp(q), 0.0)
        gw = np.where(live, gW[sl], 0.0)
        ge = gw * T[sl] if use_rho else np.zeros_like(gw)
        gl = np.zeros_like(gw)
        gs = np.zeros_like(gw)
        if use_T:
            gS = -tau * W[sl] * gw
            z = (l[:, :, None] - l[:, None, :]) / s[:, None, :]
            Phi = 0.5 * (erf(z / np.sqrt(2.0)) + 1.0)
            phi = _INV_SQRT2PI * np.exp(-0.5 * z * z)
            ge = ge + np.einsum("pu,pum->pm", gS, Phi) * live
            dterm = gS[:, :, None] * (e / s)[:, None, :] * phi * live[:, :, None] * live[:, None, :]
            gl = gl + dterm.sum(axis=2) - dterm.sum(axis=1)
            gs = gs - (dterm * z).sum(axis=1)
            gal = galpha[sl] * tau * (1.0 - alpha[sl])
            ge = ge + gal[:, None] * live
        gq = ge * e
        a = 1.0 / (s * s)
        ga = -0.5 * gs * s ** 3 - gl * l / a - 0.5 * gq * l * l
        gb = gl / a + gq * l
        gc = -0.5 * gq
        k = idx[sl][live]
        d = np.broadcast_to(D[sl][:, None, :], live.shape + (3,))[live]
        ga, gb, gc = ga[live], gb[live], gc[live]
        Mk, Ak = M[k], A[k]
        w = gb[:, None] * d + 2.0 * gc[:, None] * Mk
        np.add.at(gM, k, np.einsum("nij,nj->ni", Ak, w))
        dm = np.einsum("ni,nj->nij", d, Mk)
        contrib = (
            ga[:, None, None] * np.einsum("ni,nj->nij", d, d)
            + 0.5 * gb[:, None, None] * (dm + dm.transpose(0, 2, 1))
            + gc[:, None, None] * np.einsum("ni,nj->nij", Mk, Mk)
        )
        np.add.at(gA, k, contrib)
    return gM, gA
