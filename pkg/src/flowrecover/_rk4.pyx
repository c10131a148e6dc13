# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched RK4 solve and discrete adjoint over a polynomial library.

Same contract as ``_rk4_py``; see that module for argument conventions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite, NAN

cnp.import_array()


cdef inline void _features(const double[::1] x, const double[:] uu, const long long[::1] fptr,
                           const long long[::1] fidx, const long long[::1] inidx, double[::1] phi) noexcept nogil:
    cdef Py_ssize_t j, p, T = inidx.shape[0]
    cdef double v
    for j in range(T):
        v = 1.0
        for p in range(fptr[j], fptr[j + 1]):
            v = v * x[fidx[p]]
        if inidx[j] >= 0:
            v = v * uu[inidx[j]]
        phi[j] = v


cdef inline void _rhs(const double[:, ::1] theta, const double[::1] phi, double[::1] out) noexcept nogil:
    cdef Py_ssize_t r, j, n = theta.shape[0], T = theta.shape[1]
    cdef double acc
    for r in range(n):
        acc = 0.0
        for j in range(T):
            acc = acc + theta[r, j] * phi[j]
        out[r] = acc


def solve_batch(theta, fptr, fidx, inidx, x0, u, double h, Py_ssize_t n_steps, Py_ssize_t substeps, bint record):
    cdef const double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const long long[::1] fp = np.ascontiguousarray(fptr, dtype=np.int64)
    cdef const long long[::1] fi = np.ascontiguousarray(fidx, dtype=np.int64)
    cdef const long long[::1] ii = np.ascontiguousarray(inidx, dtype=np.int64)
    x0_arr = np.ascontiguousarray(x0, dtype=np.float64)
    cdef const double[:, ::1] xin = x0_arr
    cdef const double[:, :, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t B = x0_arr.shape[0], n = x0_arr.shape[1], T = th.shape[1]
    cdef Py_ssize_t b, s, sub, i, t

    states_arr = np.full((B, n_steps + 1, n), np.nan)
    nvalid_arr = np.full(B, n_steps + 1, dtype=np.int64)
    cdef double[:, :, ::1] states = states_arr
    cdef long long[::1] n_valid = nvalid_arr
    cdef double[:, :, :, ::1] sst
    cdef double[:, :, :, ::1] sdv
    if record:
        sst_arr = np.full((n_steps * substeps, 4, B, n), np.nan)
        sdv_arr = np.full((n_steps * substeps, 4, B, n), np.nan)
        sst = sst_arr
        sdv = sdv_arr
    else:
        sst_arr = sdv_arr = None

    cdef double[::1] x = np.empty(n)
    cdef double[::1] st = np.empty(n)
    cdef double[::1] phi = np.empty(T)
    cdef double[:, ::1] k = np.empty((4, n))
    cdef double half = 0.5 * h, sixth = h / 6.0
    cdef bint ok

    with nogil:
        for b in range(B):
            for i in range(n):
                x[i] = xin[b, i]
                states[b, 0, i] = x[i]
            for s in range(n_steps):
                for sub in range(substeps):
                    t = s * substeps + sub
                    # stage 1
                    _features(x, uv[b, s], fp, fi, ii, phi)
                    _rhs(th, phi, k[0])
                    if record:
                        for i in range(n):
                            sst[t, 0, b, i] = x[i]
                            sdv[t, 0, b, i] = k[0, i]
                    # stage 2
                    for i in range(n):
                        st[i] = x[i] + half * k[0, i]
                    _features(st, uv[b, s], fp, fi, ii, phi)
                    _rhs(th, phi, k[1])
                    if record:
                        for i in range(n):
                            sst[t, 1, b, i] = st[i]
                            sdv[t, 1, b, i] = k[1, i]
                    # stage 3
                    for i in range(n):
                        st[i] = x[i] + half * k[1, i]
                    _features(st, uv[b, s], fp, fi, ii, phi)
                    _rhs(th, phi, k[2])
                    if record:
                        for i in range(n):
                            sst[t, 2, b, i] = st[i]
                            sdv[t, 2, b, i] = k[2, i]
                    # stage 4
                    for i in range(n):
                        st[i] = x[i] + h * k[2, i]
                    _features(st, uv[b, s], fp, fi, ii, phi)
                    _rhs(th, phi, k[3])
                    if record:
                        for i in range(n):
                            sst[t, 3, b, i] = st[i]
                            sdv[t, 3, b, i] = k[3, i]
                    for i in range(n):
                        x[i] = x[i] + sixth * (((k[0, i] + 2.0 * k[1, i]) + 2.0 * k[2, i]) + k[3, i])
                ok = True
                for i in range(n):
                    if not isfinite(x[i]):
                        ok = False
                if not ok:
                    n_valid[b] = s + 1
                    break
                for i in range(n):
                    states[b, s + 1, i] = x[i]
    return states_arr, sst_arr, sdv_arr, nvalid_arr


cdef void _stage_backward(const double[:, ::1] theta, const double[:, :, :, ::1] sst, Py_ssize_t t, Py_ssize_t stage,
                          Py_ssize_t b, const double[:] uu, const double[::1] kb, const long long[::1] fp,
                          const long long[::1] fi, const long long[::1] ii, double[:, ::1] dtheta,
                          double[::1] ub, double[::1] sb) noexcept nogil:
    cdef Py_ssize_t n = theta.shape[0], T = theta.shape[1], nx = sb.shape[0]
    cdef Py_ssize_t j, r, p, q, lo, hi
    cdef double c, mono, uf, phi, other
    cdef bint has_u
    for p in range(nx):
        sb[p] = 0.0
    for j in range(T):
        c = 0.0
        for r in range(n):
            c = c + theta[r, j] * kb[r]
        lo = fp[j]
        hi = fp[j + 1]
        mono = 1.0
        for p in range(lo, hi):
            mono = mono * sst[t, stage, b, fi[p]]
        has_u = ii[j] >= 0
        if has_u:
            uf = uu[ii[j]]
            phi = mono * uf
            ub[ii[j]] += c * mono
        else:
            uf = 1.0
            phi = mono
        for r in range(n):
            dtheta[r, j] += kb[r] * phi
        for p in range(lo, hi):
            other = uf if has_u else 1.0
            for q in range(lo, hi):
                if q != p:
                    other = other * sst[t, stage, b, fi[q]]
            sb[fi[p]] += c * other


def adjoint_batch(theta, fptr, fidx, inidx, stage_states, u, double h, Py_ssize_t substeps, gstates, n_valid):
    cdef const double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const long long[::1] fp = np.ascontiguousarray(fptr, dtype=np.int64)
    cdef const long long[::1] fi = np.ascontiguousarray(fidx, dtype=np.int64)
    cdef const long long[::1] ii = np.ascontiguousarray(inidx, dtype=np.int64)
    cdef const double[:, :, :, ::1] sst = np.ascontiguousarray(stage_states, dtype=np.float64)
    cdef const double[:, :, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    g_arr = np.ascontiguousarray(gstates, dtype=np.float64)
    cdef const double[:, :, ::1] g = g_arr
    cdef const long long[::1] nv = np.ascontiguousarray(n_valid, dtype=np.int64)
    cdef Py_ssize_t B = g_arr.shape[0], S1 = g_arr.shape[1], n = g_arr.shape[2]
    cdef Py_ssize_t m = uv.shape[2], nr = th.shape[0], T = th.shape[1]

    dtheta_arr = np.zeros((nr, T))
    dx0_arr = np.zeros((B, n))
    du_arr = np.zeros((B, S1, m))
    cdef double[:, ::1] dtheta = dtheta_arr
    cdef double[:, ::1] dx0 = dx0_arr
    cdef double[:, :, ::1] du = du_arr

    cdef double[::1] gx = np.empty(n)
    cdef double[::1] xb = np.empty(n)
    cdef double[::1] sb = np.empty(n)
    cdef double[:, ::1] kb = np.empty((4, n))
    cdef double[::1] ub = np.empty(max(m, 1))
    cdef double half = 0.5 * h, sixth = h / 6.0, third = h / 3.0
    cdef Py_ssize_t b, s, sub, t, i, top

    with nogil:
        for b in range(B):
            for i in range(n):
                gx[i] = 0.0
            top = nv[b] - 1
            if top > S1 - 1:
                top = S1 - 1
            s = top
            while s >= 1:
                for i in range(n):
                    gx[i] = gx[i] + g[b, s, i]
                for i in range(m):
                    ub[i] = 0.0
                sub = substeps - 1
                while sub >= 0:
                    t = (s - 1) * substeps + sub
                    for i in range(n):
                        kb[0, i] = sixth * gx[i]
                        kb[1, i] = third * gx[i]
                        kb[2, i] = third * gx[i]
                        kb[3, i] = sixth * gx[i]
                        xb[i] = gx[i]
                    _stage_backward(th, sst, t, 3, b, uv[b, s - 1], kb[3], fp, fi, ii, dtheta, ub, sb)
                    for i in range(n):
                        xb[i] = xb[i] + sb[i]
                        kb[2, i] = kb[2, i] + h * sb[i]
                    _stage_backward(th, sst, t, 2, b, uv[b, s - 1], kb[2], fp, fi, ii, dtheta, ub, sb)
                    for i in range(n):
                        xb[i] = xb[i] + sb[i]
                        kb[1, i] = kb[1, i] + half * sb[i]
                    _stage_backward(th, sst, t, 1, b, uv[b, s - 1], kb[1], fp, fi, ii, dtheta, ub, sb)
                    for i in range(n):
                        xb[i] = xb[i] + sb[i]
                        kb[0, i] = kb[0, i] + half * sb[i]
                    _stage_backward(th, sst, t, 0, b, uv[b, s - 1], kb[0], fp, fi, ii, dtheta, ub, sb)
                    for i in range(n):
                        gx[i] = xb[i] + sb[i]
                    sub -= 1
                for i in range(m):
                    du[b, s - 1, i] += ub[i]
                s -= 1
            for i in range(n):
                dx0[b, i] = gx[i] + g[b, 0, i]
    return dtheta_arr, dx0_arr, du_arr
