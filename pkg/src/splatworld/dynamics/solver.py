"""Sequential-impulse contact solver kernel (compiled with numba)."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _cross(a0, a1, a2, b0, b1, b2):
    return a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0


@njit(cache=True)
def _apply(V, W, IM, II, body, r, j0, j1, j2, sign):
    if IM[body] == 0.0:
        return
    V[body, 0] += sign * IM[body] * j0
    V[body, 1] += sign * IM[body] * j1
    V[body, 2] += sign * IM[body] * j2
    t0, t1, t2 = _cross(r[0], r[1], r[2], j0, j1, j2)
    for k in range(3):
        W[body, k] += sign * (II[body, k, 0] * t0 + II[body, k, 1] * t1 + II[body, k, 2] * t2)


@njit(cache=True)
def _rel_velocity(V, W, a, b, ra, rb):
    wa0, wa1, wa2 = _cross(W[a, 0], W[a, 1], W[a, 2], ra[0], ra[1], ra[2])
    wb0, wb1, wb2 = _cross(W[b, 0], W[b, 1], W[b, 2], rb[0], rb[1], rb[2])
    return (V[a, 0] + wa0 - V[b, 0] - wb0,
            V[a, 1] + wa1 - V[b, 1] - wb1,
            V[a, 2] + wa2 - V[b, 2] - wb2)


@njit(cache=True)
def _effective_mass_matrix(IM, II, body, r, K):
    # K += m^-1 I - [r]x I^-1 [r]x
    if IM[body] == 0.0:
        return
    S = np.zeros((3, 3))
    S[0, 1], S[0, 2] = -r[2], r[1]
    S[1, 0], S[1, 2] = r[2], -r[0]
    S[2, 0], S[2, 1] = -r[1], r[0]
    T = S @ II[body] @ S
    for i in range(3):
        K[i, i] += IM[body]
        for j in range(3):
            K[i, j] -= T[i, j]


@njit(cache=True)
def solve_contacts(V, W, IM, II, A, B, RA, RB, N, target, mu, jn0, jt0, iterations, max_iterations, tolerance):
    """Projected Gauss-Seidel over contact rows; updates ``V`` and ``W`` in place.

    Each row enforces ``vn >= target`` with a non-negative normal impulse and a
    tangential impulse confined to the disk of radius ``mu * jn``. Returns the
    accumulated normal and tangential impulses. ``jn0``/``jt0`` warm-start them.

    At least ``iterations`` sweeps run; sweeping continues (up to
    ``max_iterations``) while some row still changes its contact velocity by
    more than ``tolerance`` (m/s).
    """
    m = A.shape[0]
    jn = np.zeros(m)
    jt = np.zeros((m, 3))
    kn = np.zeros(m)
    kt_inv = np.zeros((m, 3, 3))
    worst = np.inf
    for c in range(m):
        K = np.zeros((3, 3))
        _effective_mass_matrix(IM, II, A[c], RA[c], K)
        _effective_mass_matrix(IM, II, B[c], RB[c], K)
        n = N[c]
        kn[c] = n @ K @ n
        P = np.eye(3) - np.outer(n, n)
        M = P @ K @ P + np.outer(n, n)
        kt_inv[c] = np.linalg.inv(M)
        # warm start: previous impulses, projected onto this contact's cone
        j = max(jn0[c], 0.0)
        t = jt0[c] - (jt0[c] @ n) * n
        tm = np.sqrt(t @ t)
        if tm > mu[c] * j:
            t = t * (mu[c] * j / tm) if tm > 0.0 else t * 0.0
        jn[c] = j
        jt[c] = t
        _apply(V, W, IM, II, A[c], RA[c], j * n[0] + t[0], j * n[1] + t[1], j * n[2] + t[2], 1.0)
        _apply(V, W, IM, II, B[c], RB[c], j * n[0] + t[0], j * n[1] + t[1], j * n[2] + t[2], -1.0)
    for sweep in range(max(iterations, max_iterations)):
        if sweep >= iterations and worst <= tolerance:
            break
        worst = 0.0
        for c in range(m):
            if kn[c] <= 0.0:
                continue
            a, b = A[c], B[c]
            ra, rb, n = RA[c], RB[c], N[c]
            v0, v1, v2 = _rel_velocity(V, W, a, b, ra, rb)
            vn = v0 * n[0] + v1 * n[1] + v2 * n[2]
            new = jn[c] + (target[c] - vn) / kn[c]
            if new < 0.0:
                new = 0.0
            d = new - jn[c]
            jn[c] = new
            worst = max(worst, abs(d) * kn[c])
            if d != 0.0:
                _apply(V, W, IM, II, a, ra, d * n[0], d * n[1], d * n[2], 1.0)
                _apply(V, W, IM, II, b, rb, d * n[0], d * n[1], d * n[2], -1.0)
            if mu[c] <= 0.0:
                continue
            v0, v1, v2 = _rel_velocity(V, W, a, b, ra, rb)
            vn = v0 * n[0] + v1 * n[1] + v2 * n[2]
            t0, t1, t2 = v0 - vn * n[0], v1 - vn * n[1], v2 - vn * n[2]
            Ki = kt_inv[c]
            g0 = jt[c, 0] - (Ki[0, 0] * t0 + Ki[0, 1] * t1 + Ki[0, 2] * t2)
            g1 = jt[c, 1] - (Ki[1, 0] * t0 + Ki[1, 1] * t1 + Ki[1, 2] * t2)
            g2 = jt[c, 2] - (Ki[2, 0] * t0 + Ki[2, 1] * t1 + Ki[2, 2] * t2)
            gn = g0 * n[0] + g1 * n[1] + g2 * n[2]
            g0, g1, g2 = g0 - gn * n[0], g1 - gn * n[1], g2 - gn * n[2]
            cap = mu[c] * jn[c]
            mag = np.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
            if mag > cap:
                s = cap / mag if mag > 0.0 else 0.0
                g0, g1, g2 = g0 * s, g1 * s, g2 * s
            d0, d1, d2 = g0 - jt[c, 0], g1 - jt[c, 1], g2 - jt[c, 2]
            worst = max(worst, np.sqrt(d0 * d0 + d1 * d1 + d2 * d2) * kn[c])
            jt[c, 0], jt[c, 1], jt[c, 2] = g0, g1, g2
            _apply(V, W, IM, II, a, ra, d0, d1, d2, 1.0)
            _apply(V, W, IM, II, b, rb, d0, d1, d2, -1.0)
    return jn, jt


def solve(V, W, IM, II, A, B, RA, RB, N, target, mu, jn0, jt0, iterations, max_iterations=None, tolerance=0.0):
    if len(A) == 0:
        return np.zeros(0), np.zeros((0, 3))
    return solve_contacts(V, W, IM, II, np.ascontiguousarray(A, dtype=np.int64),
                          np.ascontiguousarray(B, dtype=np.int64), np.ascontiguousarray(RA),
                          np.ascontiguousarray(RB), np.ascontiguousarray(N),
                          np.ascontiguousarray(target), np.ascontiguousarray(mu),
                          np.ascontiguousarray(jn0), np.ascontiguousarray(jt0), int(iterations),
                          int(iterations if max_iterations is None else max_iterations), float(tolerance))
