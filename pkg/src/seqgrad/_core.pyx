# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused batched forward + BPTT for plain single-layer cells.

Gate weights arrive stacked: ``wx`` is (G*N, M), ``wh`` is (G*N, N) and
``b`` is (G*N,), with G = 1 (rnn), 4 (lstm: f, il, if, o) or 3
(gru: z, r, c; the third block of ``wh`` is W_si).  ``labels`` is (T, B)
with -1 at steps that carry no loss.  ``stop`` is the first step the
backward sweep visits (0 for full BPTT).

Matrix products go through BLAS dgemm; everything elementwise is fused
into plain loops.
"""

import numpy as np
from libc.math cimport exp, tanh, log
from scipy.linalg.cython_blas cimport dgemm

cdef double LOG_EPS = 1e-12

cdef enum:
    RNN = 0
    LSTM = 1
    GRU = 2


cdef inline double _sig(double x) nogil:
    cdef double e
    if x >= 0:
        e = exp(-x)
        return 1.0 / (1.0 + e)
    e = exp(x)
    return e / (1.0 + e)


cdef void _gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                double* a, int lda, double* b, int ldb, double beta,
                double* c, int ldc) noexcept nogil:
    # Row-major C(m x n) = alpha * op(A) @ op(B) + beta * C, via column-major dgemm
    # on the transposed problem.
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    dgemm(&ctb, &cta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


def seq_grad(int arch, double[:, ::1] wx, double[:, ::1] wh, double[::1] b,
             double[:, ::1] wout, double[::1] bout, double[:, :, ::1] X,
             long[:, ::1] labels, int stop):
    """Returns (loss, dwx, dwh, db, dwout, dbout); loss and grads summed over the batch."""
    cdef int T = X.shape[0], B = X.shape[1], M = X.shape[2]
    cdef int GN = wx.shape[0], N = wh.shape[1], K = wout.shape[0]
    cdef int G = GN // N
    if wh.shape[0] != GN or b.shape[0] != GN or wx.shape[1] != M or wout.shape[1] != N:
        raise ValueError("inconsistent kernel shapes")
    if labels.shape[0] != T or labels.shape[1] != B:
        raise ValueError("labels must be (T, B)")
    if stop < 0 or stop >= T:
        raise ValueError("stop must lie in [0, T)")

    # Forward buffers.  hbuf row block t holds h_{t-1} (block 0 is the zero state).
    xw_np = np.empty((T * B, GN))
    hbuf_np = np.zeros(((T + 1) * B, N))
    act_np = np.empty((T * B, GN))
    cbuf_np = np.zeros(((T + 1) * B, N)) if arch == LSTM else np.zeros((1, 1))
    tc_np = np.empty((T * B, N)) if arch == LSTM else np.zeros((1, 1))
    u_np = np.empty((T * B, N)) if arch == GRU else np.zeros((1, 1))
    hw_np = np.empty((B, GN))
    prob_np = np.zeros((T * B, K))
    cdef double[:, ::1] xw = xw_np, hbuf = hbuf_np, act = act_np, cbuf = cbuf_np
    cdef double[:, ::1] tcb = tc_np, ub = u_np, hw = hw_np, prob = prob_np

    cdef int t, i, j, g, row, y
    cdef double v, f, ig, cg, og, z, r, hc, mx, ssum, loss = 0.0
    cdef bint any_label

    cdef double* xp = &X[0, 0, 0]
    # xw = X @ wx^T + b for all steps at once
    _gemm(False, True, T * B, GN, M, 1.0, xp, M, &wx[0, 0], M, 0.0, &xw[0, 0], GN)
    for i in range(T * B):
        for j in range(GN):
            xw[i, j] += b[j]

    for t in range(T):
        _gemm(False, True, B, GN, N, 1.0, &hbuf[t * B, 0], N, &wh[0, 0], N, 0.0, &hw[0, 0], GN)
        for i in range(B):
            row = t * B + i
            if arch == RNN:
                for j in range(N):
                    v = tanh(xw[row, j] + hw[i, j])
                    act[row, j] = v
                    hbuf[row + B, j] = v
            elif arch == LSTM:
                for j in range(N):
                    f = _sig(xw[row, j] + hw[i, j])
                    ig = _sig(xw[row, N + j] + hw[i, N + j])
                    cg = tanh(xw[row, 2 * N + j] + hw[i, 2 * N + j])
                    og = _sig(xw[row, 3 * N + j] + hw[i, 3 * N + j])
                    act[row, j] = f
                    act[row, N + j] = ig
                    act[row, 2 * N + j] = cg
                    act[row, 3 * N + j] = og
                    v = f * cbuf[row, j] + ig * cg
                    cbuf[row + B, j] = v
                    v = tanh(v)
                    tcb[row, j] = v
                    hbuf[row + B, j] = og * v
            else:
                for j in range(N):
                    z = _sig(xw[row, j] + hw[i, j])
                    r = _sig(xw[row, N + j] + hw[i, N + j])
                    ub[row, j] = hw[i, 2 * N + j]
                    hc = tanh(xw[row, 2 * N + j] + r * hw[i, 2 * N + j])
                    act[row, j] = z
                    act[row, N + j] = r
                    act[row, 2 * N + j] = hc
                    hbuf[row + B, j] = z * hbuf[row, j] + (1.0 - z) * hc
        any_label = False
        for i in range(B):
            if labels[t, i] >= 0:
                any_label = True
        if any_label:
            # logits into prob rows of this step
            _gemm(False, True, B, K, N, 1.0, &hbuf[(t + 1) * B, 0], N, &wout[0, 0], N,
                  0.0, &prob[t * B, 0], K)
            for i in range(B):
                row = t * B + i
                mx = prob[row, 0] + bout[0]
                for j in range(K):
                    prob[row, j] += bout[j]
                    if prob[row, j] > mx:
                        mx = prob[row, j]
                ssum = 0.0
                for j in range(K):
                    prob[row, j] = exp(prob[row, j] - mx)
                    ssum += prob[row, j]
                for j in range(K):
                    prob[row, j] /= ssum
                y = labels[t, i]
                if y >= 0:
                    v = prob[row, y]
                    loss -= log(v if v > LOG_EPS else LOG_EPS)

    # Backward.
    dax_np = np.zeros((T * B, GN))
    dah_np = np.zeros((T * B, GN)) if arch == GRU else dax_np
    dh_np = np.zeros((B, N))
    dh2_np = np.zeros((B, N))
    dc_np = np.zeros((B, N))
    dlog_np = np.empty((B, K))
    dwout_np = np.zeros((K, N))
    dbout_np = np.zeros(K)
    cdef double[:, ::1] dax = dax_np, dah = dah_np, dh = dh_np, dh2 = dh2_np, dc = dc_np
    cdef double[:, ::1] dlog = dlog_np, dwout = dwout_np
    cdef double[::1] dbout = dbout_np
    cdef double dct, dz, dhc, da_c, hp

    for t in range(T - 1, stop - 1, -1):
        any_label = False
        for i in range(B):
            if labels[t, i] >= 0:
                any_label = True
        if any_label:
            for i in range(B):
                row = t * B + i
                y = labels[t, i]
                for j in range(K):
                    dlog[i, j] = prob[row, j] if y >= 0 else 0.0
                if y >= 0:
                    dlog[i, y] -= 1.0
                for j in range(K):
                    dbout[j] += dlog[i, j]
            _gemm(True, False, K, N, B, 1.0, &dlog[0, 0], K, &hbuf[(t + 1) * B, 0], N,
                  1.0, &dwout[0, 0], N)
            _gemm(False, False, B, N, K, 1.0, &dlog[0, 0], K, &wout[0, 0], N, 1.0, &dh[0, 0], N)
        for i in range(B):
            row = t * B + i
            if arch == RNN:
                for j in range(N):
                    v = act[row, j]
                    dax[row, j] = dh[i, j] * (1.0 - v * v)
                    dh2[i, j] = 0.0
            elif arch == LSTM:
                for j in range(N):
                    f = act[row, j]
                    ig = act[row, N + j]
                    cg = act[row, 2 * N + j]
                    og = act[row, 3 * N + j]
                    v = tcb[row, j]
                    dct = dc[i, j] + dh[i, j] * og * (1.0 - v * v)
                    dax[row, j] = dct * cbuf[row, j] * f * (1.0 - f)
                    dax[row, N + j] = dct * cg * ig * (1.0 - ig)
                    dax[row, 2 * N + j] = dct * ig * (1.0 - cg * cg)
                    dax[row, 3 * N + j] = dh[i, j] * v * og * (1.0 - og)
                    dc[i, j] = dct * f
                    dh2[i, j] = 0.0
            else:
                for j in range(N):
                    z = act[row, j]
                    r = act[row, N + j]
                    hc = act[row, 2 * N + j]
                    hp = hbuf[row, j]
                    dz = dh[i, j] * (hp - hc)
                    da_c = dh[i, j] * (1.0 - z) * (1.0 - hc * hc)
                    dax[row, j] = dz * z * (1.0 - z)
                    dax[row, N + j] = da_c * ub[row, j] * r * (1.0 - r)
                    dax[row, 2 * N + j] = da_c
                    dah[row, j] = dax[row, j]
                    dah[row, N + j] = dax[row, N + j]
                    dah[row, 2 * N + j] = da_c * r
                    dh2[i, j] = dh[i, j] * z
        # dh_prev = direct part + dA_h @ wh
        _gemm(False, False, B, N, GN, 1.0, &dah[t * B, 0], GN, &wh[0, 0], N, 1.0, &dh2[0, 0], N)
        dh, dh2 = dh2, dh

    dwx_np = np.zeros((GN, M))
    dwh_np = np.zeros((GN, N))
    cdef double[:, ::1] dwx = dwx_np, dwh = dwh_np
    cdef int rows = (T - stop) * B
    _gemm(True, False, GN, M, rows, 1.0, &dax[stop * B, 0], GN, xp + stop * B * M, M,
          0.0, &dwx[0, 0], M)
    _gemm(True, False, GN, N, rows, 1.0, &dah[stop * B, 0], GN, &hbuf[stop * B, 0], N,
          0.0, &dwh[0, 0], N)
    db_np = dax_np[stop * B:].sum(axis=0)
    return loss, dwx_np, dwh_np, db_np, dwout_np, dbout_np
