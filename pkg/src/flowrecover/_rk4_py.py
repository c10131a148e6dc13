"""Numpy fallback for the batched RK4 solve and its discrete adjoint.

Vectorised over the batch axis; the per-element arithmetic follows the
same operation order as the compiled kernel in ``_rk4.pyx``.

Library layout arguments (``fptr``, ``fidx``, ``inidx``) come from
:attr:`flowrecover.library.TermLibrary.kernel_layout`.
"""
import numpy as np


def _features(x, uu, fptr, fidx, inidx):
    # x: (B, n), uu: (B, m) -> (B, T)
    B = x.shape[0]
    T = inidx.shape[0]
    phi = np.empty((B, T))
    for j in range(T):
        v = np.ones(B)
        for p in range(fptr[j], fptr[j + 1]):
            v = v * x[:, fidx[p]]
        if inidx[j] >= 0:
            v = v * uu[:, inidx[j]]
        phi[:, j] = v
    return phi


def _rhs(theta, phi):
    # sum over terms in index order, matching the compiled loop
    n, T = theta.shape
    out = np.zeros((phi.shape[0], n))
    for r in range(n):
        acc = np.zeros(phi.shape[0])
        for j in range(T):
            acc = acc + theta[r, j] * phi[:, j]
        out[:, r] = acc
    return out


def solve_batch(theta, fptr, fidx, inidx, x0, u, h, n_steps, substeps, record):
    """Integrate B trajectories with ``substeps`` RK4 steps per sample.

    Returns ``(states, stage_states, stage_derivs, n_valid)``.  ``states``
    has shape (B, n_steps+1, n); rows past an element's divergence are NaN
    and ``n_valid[b]`` counts its finite samples.
    """
    theta = np.ascontiguousarray(theta, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    B, n = x0.shape
    states = np.full((B, n_steps + 1, n), np.nan)
    states[:, 0] = x0
    n_valid = np.full(B, n_steps + 1, dtype=np.int64)
    if record:
        stage_states = np.full((n_steps * substeps, 4, B, n), np.nan)
        stage_derivs = np.full((n_steps * substeps, 4, B, n), np.nan)
    else:
        stage_states = stage_derivs = None
    active = np.ones(B, dtype=bool)
    x = x0.copy()
    half = 0.5 * h
    sixth = h / 6.0
    with np.errstate(all="ignore"):
        for s in range(n_steps):
            if not active.any():
                break
            uu = u[:, s]
            for sub in range(substeps):
                s1 = x
                k1 = _rhs(theta, _features(s1, uu, fptr, fidx, inidx))
                s2 = x + half * k1
                k2 = _rhs(theta, _features(s2, uu, fptr, fidx, inidx))
                s3 = x + half * k2
                k3 = _rhs(theta, _features(s3, uu, fptr, fidx, inidx))
                s4 = x + h * k3
                k4 = _rhs(theta, _features(s4, uu, fptr, fidx, inidx))
                xn = x + sixth * (((k1 + 2.0 * k2) + 2.0 * k3) + k4)
                if record:
                    t = s * substeps + sub
                    a = active
                    stage_states[t, 0, a] = s1[a]
                    stage_states[t, 1, a] = s2[a]
                    stage_states[t, 2, a] = s3[a]
                    stage_states[t, 3, a] = s4[a]
                    stage_derivs[t, 0, a] = k1[a]
                    stage_derivs[t, 1, a] = k2[a]
                    stage_derivs[t, 2, a] = k3[a]
                    stage_derivs[t, 3, a] = k4[a]
                x = np.where(active[:, None], xn, x)
            ok = np.isfinite(x).all(axis=1)
            newly = active & ~ok
            n_valid[newly] = s + 1
            active = active & ok
            states[active, s + 1] = x[active]
            # frozen rows keep a finite placeholder so later arithmetic stays quiet
            x = np.where(active[:, None], x, 0.0)
    return states, stage_states, stage_derivs, n_valid


def _stage_backward(theta, xs, uu, kb, fptr, fidx, inidx, dtheta, ub):
    """Pull ``kb`` (gradient on a stage derivative) back to the stage state.

    Accumulates into ``dtheta`` and ``ub``; returns the state gradient.
    """
    B, n = xs.shape
    T = inidx.shape[0]
    nr = theta.shape[0]
    sb = np.zeros((B, n))
    for j in range(T):
        c = np.zeros(B)
        for r in range(nr):
            c = c + theta[r, j] * kb[:, r]
        lo, hi = fptr[j], fptr[j + 1]
        mono = np.ones(B)
        for p in range(lo, hi):
            mono = mono * xs[:, fidx[p]]
        if inidx[j] >= 0:
            uf = uu[:, inidx[j]]
            phi = mono * uf
            ub[:, inidx[j]] += c * mono
        else:
            uf = None
            phi = mono
        for r in range(nr):
            dtheta[r, j] += np.dot(kb[:, r], phi)
        for p in range(lo, hi):
            other = np.ones(B) if uf is None else uf.copy()
            for q in range(lo, hi):
                if q != p:
                    other = other * xs[:, fidx[q]]
            sb[:, fidx[p]] += c * other
    return sb


def adjoint_batch(theta, fptr, fidx, inidx, stage_states, u, h, substeps, gstates, n_valid):
    """Reverse-mode gradient of ``sum(gstates * states)`` through the solve.

    Returns ``(dtheta, dx0, du)`` with ``du`` of shape (B, n_steps+1, m);
    ``du[:, s]`` is the gradient on the input held over sample interval s.
    """
    theta = np.ascontiguousarray(theta, dtype=float)
    gstates = np.asarray(gstates, dtype=float)
    B, S1, n = gstates.shape
    m = u.shape[2]
    n_steps = S1 - 1
    dtheta = np.zeros_like(theta)
    du = np.zeros((B, S1, m))
    gx = np.zeros((B, n))
    half = 0.5 * h
    sixth = h / 6.0
    third = h / 3.0
    for s in range(n_steps, 0, -1):
        valid = s < n_valid  # sample s exists, so step s-1 -> s is live
        if not valid.any():
            continue
        gx = gx + np.where(valid[:, None], gstates[:, s], 0.0)
        uu = u[:, s - 1]
        ub = np.zeros((B, m))
        for sub in range(substeps - 1, -1, -1):
            t = (s - 1) * substeps + sub
            st = np.where(valid[None, :, None], stage_states[t], 0.0)
            kb1 = sixth * gx
            kb2 = third * gx
            kb3 = third * gx
            kb4 = sixth * gx
            xb = gx.copy()
            sb = _stage_backward(theta, st[3], uu, kb4, fptr, fidx, inidx, dtheta, ub)
            xb = xb + sb
            kb3 = kb3 + h * sb
            sb = _stage_backward(theta, st[2], uu, kb3, fptr, fidx, inidx, dtheta, ub)
            xb = xb + sb
            kb2 = kb2 + half * sb
            sb = _stage_backward(theta, st[1], uu, kb2, fptr, fidx, inidx, dtheta, ub)
            xb = xb + sb
            kb1 = kb1 + half * sb
            sb = _stage_backward(theta, st[0], uu, kb1, fptr, fidx, inidx, dtheta, ub)
            xb = xb + sb
            gx = np.where(valid[:, None], xb, 0.0)
        du[:, s - 1] += np.where(valid[:, None], ub, 0.0)
    dx0 = gx + gstates[:, 0]
    return dtheta, dx0, du
