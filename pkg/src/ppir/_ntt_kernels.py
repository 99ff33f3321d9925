"""Compiled negacyclic NTT butterflies (numba).

Same arithmetic as the vectorized transform in :mod:`ppir.he`: twist by
``ψ^i``, bit-reverse, then iterative radix-2 stages whose twiddles are laid
out back to back (stage ``s`` occupies ``[2^s - 1, 2^{s+1} - 1)``).
"""
import numba
import numpy as np


@numba.njit(cache=True)
def _stages(x, p, tw):
    n = x.shape[0]
    h = 1
    while h < n:
        for start in range(0, n, 2 * h):
            for j in range(h):
                u = x[start + j]
                v = x[start + j + h] * tw[h - 1 + j] % p
                s = u + v
                if s >= p:
                    s -= p
                d = u - v
                if d < 0:
                    d += p
                x[start + j] = s
                x[start + j + h] = d
        h *= 2


@numba.njit(cache=True)
def forward(a, mods, psi, tw, rev):
    batch, limbs, n = a.shape
    out = np.empty_like(a)
    x = np.empty(n, dtype=np.int64)
    for b in range(batch):
        for l in range(limbs):
            p = mods[l]
            for i in range(n):
                k = rev[i]
                x[i] = a[b, l, k] * psi[l, k] % p
            _stages(x, p, tw[l])
            out[b, l, :] = x
    return out


@numba.njit(cache=True)
def inverse(a, mods, psi_inv, n_inv, tw, rev):
    batch, limbs, n = a.shape
    out = np.empty_like(a)
    x = np.empty(n, dtype=np.int64)
    for b in range(batch):
        for l in range(limbs):
            p = mods[l]
            for i in range(n):
                x[i] = a[b, l, rev[i]]
            _stages(x, p, tw[l])
            scale = n_inv[l]
            for i in range(n):
                out[b, l, i] = x[i] * scale % p * psi_inv[l, i] % p
    return out
