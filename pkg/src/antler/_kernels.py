"""Compiled inner loops for batched GP rollouts.

Every routine works trajectory by trajectory with a fixed summation
order, so a trajectory's result does not depend on which batch or chunk
it was evaluated in.  ``rows`` selects the trajectories to process; per-row
outputs are indexed by position in ``rows``.
"""

import numpy as np
from numba import njit

# Reassociation lets LLVM vectorise the dot products.  NaN/inf semantics are
# kept so failure checks still see non-finite values.
_FLAGS = {"reassoc", "contract", "arcp", "nsz"}


@njit(cache=True, fastmath=_FLAGS)
def base_solve(Pp, L, qp, rows, s2, inv2l, jit, nugget, a, hit):
    """``a = L^{-1} k(P, q)`` for each selected query; ``hit`` flags exact matches."""
    P = Pp.shape[0]
    D = Pp.shape[1]
    for k in range(rows.shape[0]):
        b = rows[k]
        h = False
        for p in range(P):
            d = 0.0
            for c in range(D):
                t = Pp[p, c] - qp[b, c]
                d += t * t
            v = s2 * np.exp(-d * inv2l)
            if d == 0.0:
                h = True
                if nugget:
                    v += jit
            for j in range(p):
                v -= L[p, j] * a[k, j]
            a[k, p] = v / L[p, p]
        hit[k] = h


@njit(cache=True, fastmath=_FLAGS)
def residual(Zp, A, n, qp, a, rows, s2, inv2l, jit, nugget, r, hit):
    """``r = k(Z_:n, q) - A_:n a``, the part of the cross-covariance not explained by the base."""
    D = Zp.shape[2]
    P = A.shape[2]
    for k in range(rows.shape[0]):
        b = rows[k]
        h = False
        for i in range(n):
            d = 0.0
            for c in range(D):
                t = Zp[b, i, c] - qp[b, c]
                d += t * t
            v = s2 * np.exp(-d * inv2l)
            if d == 0.0:
                h = True
                if nugget:
                    v += jit
            for p in range(P):
                v -= A[b, i, p] * a[k, p]
            r[k, i] = v
        hit[k] = h


@njit(cache=True, fastmath=_FLAGS)
def forward(S, n, r, rows, w):
    """Forward substitution ``w = S_:n,:n^{-1} r`` per trajectory."""
    for k in range(rows.shape[0]):
        b = rows[k]
        for i in range(n):
            v = r[k, i]
            for j in range(i):
                v -= S[b, i, j] * w[k, j]
            w[k, i] = v / S[b, i, i]


@njit(cache=True, fastmath=_FLAGS)
def moments(a, vp, w, Vs, n, rows, kqq, mean, var):
    """Posterior mean ``a.vp + w.Vs`` and variance ``kqq - |a|^2 - |w|^2`` (clamped)."""
    P = a.shape[1]
    for k in range(rows.shape[0]):
        b = rows[k]
        m = 0.0
        q = 0.0
        for p in range(P):
            m += a[k, p] * vp[p]
            q += a[k, p] * a[k, p]
        for i in range(n):
            m += w[k, i] * Vs[b, i]
            q += w[k, i] * w[k, i]
        mean[k] = m
        v = kqq - q
        var[k] = v if v > 0.0 else 0.0


@njit(cache=True, fastmath=_FLAGS)
def append(S, Vs, n, a, w, vp, y, s2, noise_total, fail):
    """Grow each trajectory's factor by one row; flags rows whose pivot is not positive."""
    B = S.shape[0]
    P = a.shape[1]
    for b in range(B):
        q = 0.0
        m = 0.0
        for p in range(P):
            q += a[b, p] * a[b, p]
            m += a[b, p] * vp[p]
        for i in range(n):
            S[b, n, i] = w[b, i]
            q += w[b, i] * w[b, i]
            m += w[b, i] * Vs[b, i]
        d2 = s2 + noise_total - q
        if not d2 > 0.0:
            fail[b] = True
            d2 = noise_total if noise_total > 0.0 else 1.0
        d = np.sqrt(d2)
        S[b, n, n] = d
        Vs[b, n] = (y[b] - m) / d
