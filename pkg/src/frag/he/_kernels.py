"""Numba kernels for arithmetic modulo a vector of ~61-bit NTT primes.

All arrays are uint64 with residues in [0, q).  A residue-number-system
polynomial is an array of shape (L, N); batches add leading axes.  Every
constant fed to the kernels must already be np.uint64: mixing signed and
unsigned integers makes numba promote to float64.

Products use Shoup's trick: for a fixed operand w we keep
w' = floor(w * 2^64 / q), and a * w mod q costs one high-half multiply.
For operands that are not fixed, w' is derived on the fly from
r64 = 2^64 mod q and qinv = q^-1 mod 2^64 (see ``shoup_pre``).
"""

from __future__ import annotations

import numpy as np
from numba import njit

M32 = np.uint64(0xFFFFFFFF)
S32 = np.uint64(32)
ZERO = np.uint64(0)


@njit(inline="always")
def mulhi(a, b):
    a_lo = a & M32
    a_hi = a >> S32
    b_lo = b & M32
    b_hi = b >> S32
    ll = a_lo * b_lo
    hl = a_hi * b_lo
    lh = a_lo * b_hi
    hh = a_hi * b_hi
    cross = (ll >> S32) + (hl & M32) + lh
    return (hl >> S32) + (cross >> S32) + hh


@njit(inline="always")
def shoup_lazy(a, w, wp, q):
    # result in [0, 2q) for any a < 2^64
    return a * w - mulhi(a, wp) * q


@njit(inline="always")
def shoup_mul(a, w, wp, q):
    r = a * w - mulhi(a, wp) * q
    if r >= q:
        r -= q
    return r


@njit(inline="always")
def shoup_pre(b, r64, r64p, q, qinv):
    # floor(b * 2^64 / q): (b*2^64 - r) is an exact multiple of q and the
    # quotient is below 2^64, so multiplying by q^-1 mod 2^64 recovers it.
    r = shoup_mul(b, r64, r64p, q)
    return (ZERO - r) * qinv


@njit(inline="always")
def mulmod(a, b, r64, r64p, q, qinv):
    return shoup_mul(a, b, shoup_pre(b, r64, r64p, q, qinv), q)


@njit(inline="always")
def signed_residue(v, q):
    if v >= 0:
        return np.uint64(v)
    return q - np.uint64(-v)


# ---------------------------------------------------------------------------
# negacyclic NTT (Cooley-Tukey forward / Gentleman-Sande inverse, lazy
# Harvey butterflies; requires 4q < 2^64)


@njit(inline="always")
def _ntt_fwd_one(a, psi, psip, q):
    n = a.shape[0]
    two_q = q + q
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            j1 = 2 * i * t
            s = psi[m + i]
            sp = psip[m + i]
            for j in range(j1, j1 + t):
                u = a[j]
                if u >= two_q:
                    u -= two_q
                v = shoup_lazy(a[j + t], s, sp, q)
                a[j] = u + v
                a[j + t] = u + two_q - v
        m <<= 1
    for j in range(n):
        x = a[j]
        if x >= two_q:
            x -= two_q
        if x >= q:
            x -= q
        a[j] = x


@njit(inline="always")
def _ntt_inv_one(a, ipsi, ipsip, ninv, ninvp, q):
    n = a.shape[0]
    two_q = q + q
    t = 1
    m = n
    while m > 1:
        h = m >> 1
        j1 = 0
        for i in range(h):
            s = ipsi[h + i]
            sp = ipsip[h + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                x = u + v
                if x >= two_q:
                    x -= two_q
                a[j] = x
                a[j + t] = shoup_lazy(u + two_q - v, s, sp, q)
            j1 += 2 * t
        t <<= 1
        m = h
    for j in range(n):
        a[j] = shoup_mul(a[j], ninv, ninvp, q)


@njit(cache=True, nogil=True)
def ntt_forward(x, psi, psip, moduli):
    """In place; x has shape (B, L, N)."""
    for b in range(x.shape[0]):
        for l in range(x.shape[1]):
            _ntt_fwd_one(x[b, l], psi[l], psip[l], moduli[l])


@njit(cache=True, nogil=True)
def ntt_inverse(x, ipsi, ipsip, ninv, ninvp, moduli):
    """In place; x has shape (B, L, N)."""
    for b in range(x.shape[0]):
        for l in range(x.shape[1]):
            _ntt_inv_one(x[b, l], ipsi[l], ipsip[l], ninv[l], ninvp[l], moduli[l])


# ---------------------------------------------------------------------------
# coefficient-wise arithmetic; arrays are (B, L, N)


@njit(cache=True, nogil=True)
def add_mod(a, b, out, moduli):
    for i in range(a.shape[0]):
        for l in range(a.shape[1]):
            q = moduli[l]
            for j in range(a.shape[2]):
                s = a[i, l, j] + b[i, l, j]
                if s >= q:
                    s -= q
                out[i, l, j] = s


@njit(cache=True, nogil=True)
def sub_mod(a, b, out, moduli):
    for i in range(a.shape[0]):
        for l in range(a.shape[1]):
            q = moduli[l]
            for j in range(a.shape[2]):
                s = a[i, l, j] + q - b[i, l, j]
                if s >= q:
                    s -= q
                out[i, l, j] = s


@njit(cache=True, nogil=True)
def mul_scalar(a, c, cp, out, moduli):
    """out = a * c[l] per residue row; cp holds the Shoup companions of c."""
    for i in range(a.shape[0]):
        for l in range(a.shape[1]):
            q = moduli[l]
            w = c[l]
            wp = cp[l]
            for j in range(a.shape[2]):
                out[i, l, j] = shoup_mul(a[i, l, j], w, wp, q)


@njit(cache=True, nogil=True)
def mul_fixed(a, w, wp, out, moduli):
    """out[i] = a[i] * w pointwise, w of shape (L, N) with companions wp."""
    for i in range(a.shape[0]):
        for l in range(a.shape[1]):
            q = moduli[l]
            for j in range(a.shape[2]):
                out[i, l, j] = shoup_mul(a[i, l, j], w[l, j], wp[l, j], q)


@njit(cache=True, nogil=True)
def shoup_companions(w, out, r64, r64p, moduli, qinv):
    for i in range(w.shape[0]):
        for l in range(w.shape[1]):
            q = moduli[l]
            for j in range(w.shape[2]):
                out[i, l, j] = shoup_pre(w[i, l, j], r64[l], r64p[l], q, qinv[l])


@njit(cache=True, nogil=True)
def tensor(a, b, out, r64, r64p, moduli, qinv):
    """Degree-1 x degree-1 -> degree-2: (a0b0, a0b1 + a1b0, a1b1)."""
    for l in range(a.shape[1]):
        q = moduli[l]
        for j in range(a.shape[2]):
            a0 = a[0, l, j]
            a1 = a[1, l, j]
            b0 = b[0, l, j]
            b1 = b[1, l, j]
            b0p = shoup_pre(b0, r64[l], r64p[l], q, qinv[l])
            b1p = shoup_pre(b1, r64[l], r64p[l], q, qinv[l])
            out[0, l, j] = shoup_mul(a0, b0, b0p, q)
            x = shoup_mul(a0, b1, b1p, q) + shoup_mul(a1, b0, b0p, q)
            if x >= q:
                x -= q
            out[1, l, j] = x
            out[2, l, j] = shoup_mul(a1, b1, b1p, q)


@njit(cache=True, nogil=True)
def tensor_dot(elems, qry, qryp, out, moduli):
    """out = sum_i tensor(elems[i], qry[i]); qry is fixed (companions qryp).

    elems, qry, qryp: (m, 2, L, N); out: (3, L, N).
    """
    m = elems.shape[0]
    nl = elems.shape[2]
    n = elems.shape[3]
    for l in range(nl):
        q = moduli[l]
        d0 = out[0, l]
        d1 = out[1, l]
        d2 = out[2, l]
        for j in range(n):
            d0[j] = ZERO
            d1[j] = ZERO
            d2[j] = ZERO
        for i in range(m):
            a0 = elems[i, 0, l]
            a1 = elems[i, 1, l]
            b0 = qry[i, 0, l]
            b1 = qry[i, 1, l]
            p0 = qryp[i, 0, l]
            p1 = qryp[i, 1, l]
            for j in range(n):
                x = d0[j] + shoup_mul(a0[j], b0[j], p0[j], q)
                if x >= q:
                    x -= q
                d0[j] = x
                y = d1[j] + shoup_mul(a0[j], b1[j], p1[j], q)
                if y >= q:
                    y -= q
                y += shoup_mul(a1[j], b0[j], p0[j], q)
                if y >= q:
                    y -= q
                d1[j] = y
                z = d2[j] + shoup_mul(a1[j], b1[j], p1[j], q)
                if z >= q:
                    z -= q
                d2[j] = z


@njit(cache=True, nogil=True)
def phase_constant(cts, spow, spowp, ninv, ninvp, moduli, out):
    """Constant coefficient of c0 + c1*s (+ c2*s^2) for a batch.

    cts: (B, D, L, N) in evaluation form with D in {2, 3}; out: (B, L).
    For the negacyclic transform the constant coefficient equals
    N^-1 * (sum of all evaluations), so no inverse transform is needed.
    """
    deg = cts.shape[1]
    for b in range(cts.shape[0]):
        for l in range(cts.shape[2]):
            q = moduli[l]
            acc = ZERO
            for j in range(cts.shape[3]):
                x = cts[b, 0, l, j] + shoup_mul(cts[b, 1, l, j], spow[0, l, j], spowp[0, l, j], q)
                if x >= q:
                    x -= q
                if deg == 3:
                    x += shoup_mul(cts[b, 2, l, j], spow[1, l, j], spowp[1, l, j], q)
                    if x >= q:
                        x -= q
                acc += x
                if acc >= q:
                    acc -= q
            out[b, l] = shoup_mul(acc, ninv[l], ninvp[l], q)


@njit(cache=True, nogil=True)
def phase_poly(ct, spow, spowp, moduli, out):
    """Evaluation form of c0 + c1*s (+ c2*s^2); ct: (D, L, N), out: (1, L, N)."""
    deg = ct.shape[0]
    for l in range(ct.shape[1]):
        q = moduli[l]
        for j in range(ct.shape[2]):
            x = ct[0, l, j] + shoup_mul(ct[1, l, j], spow[0, l, j], spowp[0, l, j], q)
            if x >= q:
                x -= q
            if deg == 3:
                x += shoup_mul(ct[2, l, j], spow[1, l, j], spowp[1, l, j], q)
                if x >= q:
                    x -= q
            out[0, l, j] = x


@njit(cache=True, nogil=True)
def encrypt_batch(u, e, msg, pk, pkp, psi, psip, moduli, out):
    """Public-key encryption of B constant-term messages.

    u: (B, N) int8 ternary; e: (B, 2, N) int64 noise; msg: (B, L) residues
    of the encoded message; pk/pkp: (2, L, N) evaluation form of (b, a) and
    companions.  out: (B, 2, L, N) receives (b*u + e0 + m, a*u + e1).
    """
    nb = u.shape[0]
    nl = moduli.shape[0]
    n = u.shape[1]
    tmp = np.empty((3, n), dtype=np.uint64)
    for b in range(nb):
        for l in range(nl):
            q = moduli[l]
            for j in range(n):
                tmp[0, j] = signed_residue(np.int64(u[b, j]), q)
                tmp[1, j] = signed_residue(e[b, 0, j], q)
                tmp[2, j] = signed_residue(e[b, 1, j], q)
            for r in range(3):
                _ntt_fwd_one(tmp[r], psi[l], psip[l], q)
            m = msg[b, l]
            for j in range(n):
                c0 = shoup_mul(tmp[0, j], pk[0, l, j], pkp[0, l, j], q) + tmp[1, j]
                if c0 >= q:
                    c0 -= q
                c0 += m
                if c0 >= q:
                    c0 -= q
                out[b, 0, l, j] = c0
                c1 = shoup_mul(tmp[0, j], pk[1, l, j], pkp[1, l, j], q) + tmp[2, j]
                if c1 >= q:
                    c1 -= q
                out[b, 1, l, j] = c1


@njit(cache=True, nogil=True)
def pivot_sum(pivots, idx, zero, negate, out, moduli):
    """out = zero + (-1)^negate * sum(pivots[idx]); shapes (P, 2, L, N) / (2, L, N)."""
    nl = pivots.shape[2]
    n = pivots.shape[3]
    for c in range(2):
        for l in range(nl):
            q = moduli[l]
            o = out[c, l]
            for j in range(n):
                o[j] = ZERO
            for k in idx:
                p = pivots[k, c, l]
                for j in range(n):
                    x = o[j] + p[j]
                    if x >= q:
                        x -= q
                    o[j] = x
            z = zero[c, l]
            if negate:
                for j in range(n):
                    x = z[j] + q - o[j]
                    if x >= q:
                        x -= q
                    o[j] = x
            else:
                for j in range(n):
                    x = z[j] + o[j]
                    if x >= q:
                        x -= q
                    o[j] = x


@njit(cache=True, nogil=True)
def pivot_sum_batch(pivots, mags, negs, zeros, out, moduli):
    """Batched ``pivot_sum``: bit k of mags[b] selects pivots[k].

    mags: (B,) uint64; negs: (B,) bool; zeros/out: (B, 2, L, N).
    """
    nl = pivots.shape[2]
    n = pivots.shape[3]
    npiv = pivots.shape[0]
    one = np.uint64(1)
    for b in range(mags.shape[0]):
        r = mags[b]
        for c in range(2):
            for l in range(nl):
                q = moduli[l]
                o = out[b, c, l]
                for j in range(n):
                    o[j] = ZERO
                for k in range(npiv):
                    if (r >> np.uint64(k)) & one:
                        p = pivots[k, c, l]
                        for j in range(n):
                            x = o[j] + p[j]
                            if x >= q:
                                x -= q
                            o[j] = x
                z = zeros[b, c, l]
                if negs[b]:
                    for j in range(n):
                        x = z[j] + q - o[j]
                        if x >= q:
                            x -= q
                        o[j] = x
                else:
                    for j in range(n):
                        x = z[j] + o[j]
                        if x >= q:
                            x -= q
                        o[j] = x
