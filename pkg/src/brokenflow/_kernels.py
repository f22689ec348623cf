"""Compiled loops over lattice relations."""
import numba
import numpy as np


@numba.njit(cache=True)
def minplus_dense(indptr, leg_mesh, leg_len, exit_ok, m):
    """``E[i, j] = min over nodes of len_a + len_b`` (leg a at mesh i, leg b at mesh j)."""
    E = np.full((m, m), np.inf)
    for node in range(len(indptr) - 1):
        lo, hi = indptr[node], indptr[node + 1]
        for a in range(lo, hi):
            i = leg_mesh[a]
            la = leg_len[a]
            for b in range(lo, hi):
                if exit_ok[b]:
                    t = la + leg_len[b]
                    j = leg_mesh[b]
                    if t < E[i, j]:
                        E[i, j] = t
    return E


@numba.njit(cache=True)
def pair_count(indptr, exit_ok, leg_len, t_max):
    c = 0
    for node in range(len(indptr) - 1):
        lo, hi = indptr[node], indptr[node + 1]
        for a in range(lo, hi):
            for b in range(lo, hi):
                if exit_ok[b] and leg_len[a] + leg_len[b] < t_max:
                    c += 1
    return c


@numba.njit(cache=True)
def pair_fill(indptr, leg_mesh, leg_len, exit_ok, t_max, size):
    I = np.empty(size, np.int64)
    J = np.empty(size, np.int64)
    T = np.empty(size)
    c = 0
    for node in range(len(indptr) - 1):
        lo, hi = indptr[node], indptr[node + 1]
        for a in range(lo, hi):
            for b in range(lo, hi):
                if exit_ok[b]:
                    t = leg_len[a] + leg_len[b]
                    if t < t_max:
                        I[c] = leg_mesh[a]
                        J[c] = leg_mesh[b]
                        T[c] = t
                        c += 1
    return I, J, T
