"""Hot inner loops of the selective scan.

The recurrence is sequential along L, so it cannot be vectorized away in
numpy; the default path compiles it with numba. Setting the environment
variable ``SSMSEG_BACKEND=numpy`` selects a pure-numpy fallback (loop
over L only) that computes identical values up to rounding.

The exponentials of the zero-order-hold terms dominate raw flops, so
they are evaluated once with numpy's SIMD exp and handed to the jitted
recurrence, which is pure multiply-add; the backward pass reuses the
saved terms instead of recomputing them. Arrays are laid out [B, D, L, N]
(state axis last, contiguous) so the inner state loop vectorizes.

Public entry points (a[D,N] negative diagonal, bt/ct[B,N,L], dt[B,D,L]
positive, u[B,D,L], dskip[D]):

    scan_forward(a, bt, ct, dt, u, dskip)            -> y
    scan_forward_terms(...)                          -> y, ab, kco
    scan_backward(..., gy, ab=None, kco=None)        -> six gradients

``benchmarks/bench_scan.py`` times the two backends against each other.
"""

from __future__ import annotations

import os

import numpy as np

_TAYLOR_CUTOFF = 1e-6

_env = os.environ.get("SSMSEG_BACKEND", "").strip().lower()
if _env not in ("", "numba", "numpy"):
    raise ValueError(f"SSMSEG_BACKEND must be 'numba' or 'numpy', got {_env!r}")

if _env == "numpy":
    _HAVE_NUMBA = False
else:
    # default TBB probe warns on older TBB builds; omp is always present here
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    try:
        from numba import njit, prange
        _HAVE_NUMBA = True
    except ImportError:
        if _env == "numba":
            raise
        _HAVE_NUMBA = False

BACKEND = "numba" if _HAVE_NUMBA else "numpy"


def _as_c64(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def zoh_terms(a, dt):
    """Exact zero-order-hold terms, [B, D, L, N]:

    ab  = exp(dt * a)
    kco = (exp(dt * a) - 1) / a,  or dt*(1 + dt*a/2) once |dt*a| < 1e-6
    """
    da = dt[:, :, :, None] * a[None, :, None, :]
    ab = np.exp(da)
    small = np.abs(da) < _TAYLOR_CUTOFF
    denom = np.where(small, 1.0, a[None, :, None, :])
    kco = np.where(small, dt[:, :, :, None] * (1.0 + 0.5 * da), (ab - 1.0) / denom)
    return ab, kco


def _zoh_derivatives(a, dt, ab):
    """d(kco)/d(dt) and d(kco)/d(a), [B, D, L, N]."""
    a_b = a[None, :, None, :]
    dt_b = dt[:, :, :, None]
    da = dt_b * a_b
    small = np.abs(da) < _TAYLOR_CUTOFF
    dk_ddt = np.where(small, 1.0 + da, ab)
    dk_da = np.where(small, 0.5 * dt_b * dt_b,
                     (dt_b * ab * a_b - ab + 1.0) / np.where(small, 1.0, a_b * a_b))
    return dk_ddt, dk_da


# -- pure numpy path ----------------------------------------------------


def _recur_fwd_numpy(ab, kco, bt, ct, u, dskip):
    B, D, L, N = ab.shape
    bu = kco * bt.transpose(0, 2, 1)[:, None, :, :] * u[:, :, :, None]
    y = np.empty((B, D, L))
    h = np.zeros((B, D, N))
    ctT = ct.transpose(0, 2, 1)
    for l in range(L):
        h = ab[:, :, l, :] * h + bu[:, :, l, :]
        y[:, :, l] = np.einsum("bdn,bn->bd", h, ctT[:, l, :])
    return y + dskip[None, :, None] * u


def _recur_bwd_numpy(ab, kco, bt, ct, dt, u, dskip, dk_ddt, dk_da, a, gy):
    B, D, L, N = ab.shape
    btT = bt.transpose(0, 2, 1)
    ctT = ct.transpose(0, 2, 1)
    bu = kco * btT[:, None, :, :] * u[:, :, :, None]
    h_all = np.empty((B, D, L, N))
    h = np.zeros((B, D, N))
    for l in range(L):
        h = ab[:, :, l, :] * h + bu[:, :, l, :]
        h_all[:, :, l, :] = h

    ga = np.zeros((D, N))
    gbt = np.zeros_like(bt)
    gct = np.zeros_like(ct)
    gdt = np.zeros_like(dt)
    gu = gy * dskip[None, :, None]
    gdskip = np.einsum("bdl,bdl->d", gy, u)

    gh = np.zeros((B, D, N))
    zero = np.zeros((B, D, N))
    for l in range(L - 1, -1, -1):
        ghl = gh + gy[:, :, None, l] * ctT[:, None, l, :]
        gct[:, :, l] = np.einsum("bd,bdn->bn", gy[:, :, l], h_all[:, :, l, :])
        hprev = h_all[:, :, l - 1, :] if l > 0 else zero
        dab = ghl * hprev
        dbb = ghl * u[:, :, None, l]
        btl = btT[:, None, l, :]
        gbt[:, :, l] = np.einsum("bdn,bdn->bn", dbb, kco[:, :, l, :])
        gu[:, :, l] += np.einsum("bdn,bdn->bd", ghl, kco[:, :, l, :] * btl)
        gdt[:, :, l] = (dab * a[None, :, :] * ab[:, :, l, :]
                        + dbb * btl * dk_ddt[:, :, l, :]).sum(-1)
        ga += (dab * dt[:, :, None, l] * ab[:, :, l, :]
               + dbb * btl * dk_da[:, :, l, :]).sum(0)
        gh = ghl * ab[:, :, l, :]
    return ga, gbt, gct, gdt, gu, gdskip


# -- numba path ----------------------------------------------------------
#
# The ZOH terms and their derivatives are computed inline (scalar exp,
# one fused pass) instead of materializing [B,D,L,N] numpy temporaries,
# which is what dominates wall time otherwise.

if _HAVE_NUMBA:

    @njit(cache=True, parallel=True, fastmath=True)
    def _fwd_jit(a, btT, ctT, dt, u, dskip, save):  # pragma: no cover - compiled
        B, D, L = u.shape
        N = a.shape[1]
        y = np.empty((B, D, L))
        if save:
            ab = np.empty((B, D, L, N))
            kco = np.empty((B, D, L, N))
        else:
            ab = np.empty((1, 1, 1, 1))
            kco = np.empty((1, 1, 1, 1))
        for b in prange(B):
            h = np.empty(N)
            for d in range(D):
                for n in range(N):
                    h[n] = 0.0
                for l in range(L):
                    uv = u[b, d, l]
                    dtv = dt[b, d, l]
                    acc = 0.0
                    for n in range(N):
                        av = a[d, n]
                        da = dtv * av
                        e = np.exp(da)
                        if abs(da) < _TAYLOR_CUTOFF:
                            kv = dtv * (1.0 + 0.5 * da)
                        else:
                            kv = (e - 1.0) / av
                        if save:
                            ab[b, d, l, n] = e
                            kco[b, d, l, n] = kv
                        h[n] = e * h[n] + kv * btT[b, l, n] * uv
                        acc += ctT[b, l, n] * h[n]
                    y[b, d, l] = acc + dskip[d] * uv
        return y, ab, kco

    @njit(cache=True, parallel=True, fastmath=True)
    def _bwd_jit(a, btT, ctT, dt, u, dskip, ab, kco, gy):  # pragma: no cover
        B, D, L = u.shape
        N = a.shape[1]
        ga_p = np.zeros((B, D, N))
        gbtT = np.zeros((B, L, N))
        gctT = np.zeros((B, L, N))
        gdt = np.zeros((B, D, L))
        gu = np.zeros((B, D, L))
        gdskip_p = np.zeros((B, D))
        for b in prange(B):
            h = np.empty((L, N))
            gh = np.empty(N)
            for d in range(D):
                for l in range(L):
                    uv = u[b, d, l]
                    if l == 0:
                        for n in range(N):
                            h[0, n] = kco[b, d, 0, n] * btT[b, 0, n] * uv
                    else:
                        for n in range(N):
                            h[l, n] = (ab[b, d, l, n] * h[l - 1, n]
                                       + kco[b, d, l, n] * btT[b, l, n] * uv)
                for n in range(N):
                    gh[n] = 0.0
                gds = 0.0
                for l in range(L - 1, -1, -1):
                    gyv = gy[b, d, l]
                    uv = u[b, d, l]
                    dtv = dt[b, d, l]
                    gds += gyv * uv
                    guv = gyv * dskip[d]
                    gdtv = 0.0
                    for n in range(N):
                        av = a[d, n]
                        da = dtv * av
                        e = ab[b, d, l, n]
                        kv = kco[b, d, l, n]
                        btv = btT[b, l, n]
                        if abs(da) < _TAYLOR_CUTOFF:
                            dk_ddt = 1.0 + da
                            dk_da = 0.5 * dtv * dtv
                        else:
                            dk_ddt = e
                            dk_da = (dtv * e * av - e + 1.0) / (av * av)
                        ghn = gh[n] + gyv * ctT[b, l, n]
                        gctT[b, l, n] += gyv * h[l, n]
                        hprev = h[l - 1, n] if l > 0 else 0.0
                        dab = ghn * hprev
                        dbb = ghn * uv
                        gbtT[b, l, n] += dbb * kv
                        guv += ghn * kv * btv
                        gdtv += dab * av * e + dbb * btv * dk_ddt
                        ga_p[b, d, n] += dab * dtv * e + dbb * btv * dk_da
                        gh[n] = ghn * e
                    gdt[b, d, l] = gdtv
                    gu[b, d, l] = guv
                gdskip_p[b, d] = gds
        return ga_p, gbtT, gctT, gdt, gu, gdskip_p


def _forward_impl(a, bt, ct, dt, u, dskip, save: bool):
    a, bt, ct, dt, u, dskip = _as_c64(a, bt, ct, dt, u, dskip)
    if BACKEND == "numba":
        btT = np.ascontiguousarray(bt.transpose(0, 2, 1))
        ctT = np.ascontiguousarray(ct.transpose(0, 2, 1))
        y, ab, kco = _fwd_jit(a, btT, ctT, dt, u, dskip, save)
        return y, (ab if save else None), (kco if save else None)
    ab, kco = zoh_terms(a, dt)
    y = _recur_fwd_numpy(ab, kco, bt, ct, u, dskip)
    return y, (ab if save else None), (kco if save else None)


def scan_forward(a, bt, ct, dt, u, dskip):
    return _forward_impl(a, bt, ct, dt, u, dskip, save=False)[0]


def scan_forward_terms(a, bt, ct, dt, u, dskip):
    """Forward pass that also returns the saved ZOH terms for backward."""
    return _forward_impl(a, bt, ct, dt, u, dskip, save=True)


def scan_backward(a, bt, ct, dt, u, dskip, gy, ab=None, kco=None):
    a, bt, ct, dt, u, dskip, gy = _as_c64(a, bt, ct, dt, u, dskip, gy)
    if ab is None or kco is None:
        ab, kco = zoh_terms(a, dt)
    if BACKEND == "numba":
        btT = np.ascontiguousarray(bt.transpose(0, 2, 1))
        ctT = np.ascontiguousarray(ct.transpose(0, 2, 1))
        ga_p, gbtT, gctT, gdt, gu, gdskip_p = _bwd_jit(
            a, btT, ctT, dt, u, dskip, ab, kco, gy)
        return (ga_p.sum(axis=0), np.ascontiguousarray(gbtT.transpose(0, 2, 1)),
                np.ascontiguousarray(gctT.transpose(0, 2, 1)), gdt, gu,
                gdskip_p.sum(axis=0))
    dk_ddt, dk_da = _zoh_derivatives(a, dt, ab)
    return _recur_bwd_numpy(ab, kco, bt, ct, dt, u, dskip, dk_ddt, dk_da, a, gy)


def warmup():
    """Trigger JIT compilation with a tiny problem (no-op on numpy path)."""
    if BACKEND != "numba":
        return
    a = -np.ones((1, 1))
    bt = np.ones((1, 1, 2))
    ct = np.ones((1, 1, 2))
    dt = np.full((1, 1, 2), 0.1)
    u = np.ones((1, 1, 2))
    dskip = np.zeros(1)
    y = scan_forward(a, bt, ct, dt, u, dskip)
    scan_backward(a, bt, ct, dt, u, dskip, np.zeros_like(y))
