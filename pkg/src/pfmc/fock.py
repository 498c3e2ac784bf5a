"""Dense Fock-space toolkit used as the brute-force reference.

Vectors have length 2^M with bit i of the index marking mode i.  Everything
here is exponential in M and guarded; nothing in the Monte Carlo path calls
into this module.

The induced action of a single-particle matrix G (c†_j -> sum_i G_ij c†_i) is
applied through an LU factorization G = P L D N: unit-triangular factors
split into elementary maps I + f E_pq whose Fock action is exactly
1 + f c†_p c_q, the diagonal acts as prod_i d_i^{n_i}, and the permutation
relabels modes with the reordering sign.  This shares no code with the
Pfaffian estimators.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import CapacityError, ValidationError
from .states import ApsgState, apsg_to_statevector

EXPECTATION_GUARD = 16

Operator = Callable[[np.ndarray], np.ndarray]


def _num_modes(vec: np.ndarray) -> int:
    m = int(vec.size).bit_length() - 1
    if 1 << m != vec.size:
        raise ValidationError(f"statevector length {vec.size} is not a power of two")
    return m


def _popcount(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.int64)
    out = np.zeros_like(x)
    while np.any(x):
        out += x & 1
        x >>= 1
    return out


def _below_sign(idx: np.ndarray, mode: int) -> np.ndarray:
    return 1 - 2 * (_popcount(idx & ((1 << mode) - 1)) & 1)


def annihilate(vec: np.ndarray, mode: int) -> np.ndarray:
    m = _num_modes(vec)
    idx = np.arange(1 << m)
    occ = (idx >> mode) & 1 == 1
    out = np.zeros_like(vec)
    src = idx[occ]
    out[src ^ (1 << mode)] = _below_sign(src, mode) * vec[src]
    return out


def create(vec: np.ndarray, mode: int) -> np.ndarray:
    m = _num_modes(vec)
    idx = np.arange(1 << m)
    empty = (idx >> mode) & 1 == 0
    out = np.zeros_like(vec)
    src = idx[empty]
    out[src | (1 << mode)] = _below_sign(src, mode) * vec[src]
    return out


def occupations(num_modes: int) -> np.ndarray:
    """(2^M, M) 0/1 table of mode occupations."""
    idx = np.arange(1 << num_modes)
    return ((idx[:, None] >> np.arange(num_modes)[None, :]) & 1).astype(np.int8)


def vacuum(num_modes: int) -> np.ndarray:
    vec = np.zeros(1 << num_modes, dtype=complex)
    vec[0] = 1.0
    return vec


def apply_hop(vec: np.ndarray, p: int, q: int) -> np.ndarray:
    """c†_p c_q applied to vec."""
    return create(annihilate(vec, q), p)


def apply_one_body(vec: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sum_pq X_pq c†_p c_q applied to vec."""
    x = np.asarray(x)
    out = np.zeros_like(vec)
    for p, q in zip(*np.nonzero(x)):
        out += x[p, q] * apply_hop(vec, int(p), int(q))
    return out


def apply_diagonal(vec: np.ndarray, d: np.ndarray) -> np.ndarray:
    """prod_i d_i^{n_i} applied to vec."""
    m = _num_modes(vec)
    occ = occupations(m)
    factors = np.where(occ == 1, np.asarray(d)[None, :], 1.0)
    return vec * np.prod(factors, axis=1)


def apply_mode_permutation(vec: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Action of c†_j -> c†_{perm[j]} on vec, including the reorder sign."""
    m = _num_modes(vec)
    perm = np.asarray(perm, dtype=np.int64)
    idx = np.arange(1 << m, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(m)[None, :]) & 1
    new_idx = np.sum(bits << perm[None, :], axis=1)
    inversions = np.zeros(idx.size, dtype=np.int64)
    for j in range(m):
        for k in range(j + 1, m):
            if perm[j] > perm[k]:
                inversions += bits[:, j] & bits[:, k]
    out = np.zeros_like(vec)
    out[new_idx] = np.where(inversions % 2 == 0, 1.0, -1.0) * vec
    return out


def apply_map(g, vec: np.ndarray) -> np.ndarray:
    """Fock-space action of the single-particle matrix G on vec."""
    g = np.asarray(getattr(g, "matrix", g), dtype=complex)
    m = _num_modes(vec)
    if g.shape != (m, m):
        raise ValidationError(f"map is {g.shape}, statevector has {m} modes")
    p, lower, upper = scipy.linalg.lu(g)
    diag = np.diag(upper).copy()
    if np.any(np.abs(diag) < 1e-300):
        return _apply_map_by_creators(g, vec)
    unit_upper = upper / diag[:, None]
    out = vec.astype(complex).copy()
    # G = P L D N, applied right to left
    for k in range(m):
        for j in range(k + 1, m):
            f = unit_upper[k, j]
            if f != 0:
                out = out + f * apply_hop(out, k, j)
    out = apply_diagonal(out, diag)
    for k in range(m - 1, -1, -1):
        for i in range(k + 1, m):
            f = lower[i, k]
            if f != 0:
                out = out + f * apply_hop(out, i, k)
    perm = np.argmax(np.abs(p), axis=0)
    return apply_mode_permutation(out, perm)


def _apply_map_by_creators(g: np.ndarray, vec: np.ndarray) -> np.ndarray:
    m = g.shape[0]
    out = np.zeros_like(vec, dtype=complex)
    for index in np.nonzero(vec)[0]:
        state = vacuum(m)
        modes = [i for i in range(m) if index >> i & 1]
        for j in reversed(modes):
            new = np.zeros_like(state)
            for i in range(m):
                if g[i, j] != 0:
                    new += g[i, j] * create(state, i)
            state = new
        out += vec[index] * state
    return out


def _check_guard(num_modes: int) -> None:
    if num_modes > EXPECTATION_GUARD:
        raise CapacityError(
            f"{num_modes} modes exceeds the dense expectation guard {EXPECTATION_GUARD}",
            guard=EXPECTATION_GUARD)


def oracle_transition(obs: Operator, g_left, g_right, phi: ApsgState, psi: ApsgState) -> complex:
    """Exact <Phi| G_L† O G_R |Psi> by dense statevector evolution."""
    _check_guard(psi.num_modes)
    left = apply_map(g_left, apsg_to_statevector(phi))
    right = apply_map(g_right, apsg_to_statevector(psi))
    return complex(np.vdot(left, obs(right)))


def oracle_expectation(obs: Operator, g, psi: ApsgState) -> complex:
    """Exact <Psi| G† O G |Psi>."""
    return oracle_transition(obs, g, g, psi, psi)


def identity_operator() -> Operator:
    return lambda v: v


def number_product(modes: Sequence[int]) -> Operator:
    """prod_{i in S} n_i."""
    modes = list(modes)

    def op(vec):
        idx = np.arange(vec.size)
        mask = sum(1 << i for i in modes)
        return np.where(idx & mask == mask, vec, 0)

    return op


def parity_string(modes: Sequence[int]) -> Operator:
    mask = sum(1 << i for i in modes)

    def op(vec):
        idx = np.arange(vec.size, dtype=np.int64)
        return vec * (1 - 2 * (_popcount(idx & mask) & 1))

    return op


def one_body(x: np.ndarray) -> Operator:
    return lambda v: apply_one_body(v, x)


def two_body(p: int, q: int, r: int, s: int) -> Operator:
    """c†_p c†_q c_s c_r."""
    return lambda v: create(create(annihilate(annihilate(v, r), s), q), p)


def diagonal_operator(values_fn: Callable[[np.ndarray], np.ndarray]) -> Operator:
    """Operator diagonal in the Fock basis; values_fn maps the occupation table to eigenvalues."""

    def op(vec):
        return vec * values_fn(occupations(_num_modes(vec)))

    return op


def wilson_loop(sites: Sequence[int], num_sites: int) -> Operator:
    """prod_{j in C} (1 - n_{j up} n_{j down}) with up modes [0,L), down modes [L,2L)."""
    sites = list(sites)

    def values(occ):
        out = np.ones(occ.shape[0])
        for j in sites:
            out *= 1 - occ[:, j] * occ[:, num_sites + j]
        return out

    return diagonal_operator(values)


def product_operator(*ops: Operator) -> Operator:
    """Composition ops[0] ops[1] ... (rightmost acts first)."""

    def op(vec):
        for o in reversed(ops):
            vec = o(vec)
        return vec

    return op


def sum_operator(terms: Sequence[tuple[complex, Operator]]) -> Operator:
    def op(vec):
        out = np.zeros_like(vec, dtype=complex)
        for c, o in terms:
            out += c * o(vec)
        return out

    return op


def one_body_sparse(h: np.ndarray) -> sp.csr_matrix:
    """Sparse 2^M matrix of sum_pq h_pq c†_p c_q."""
    h = np.asarray(h, dtype=complex)
    m = h.shape[0]
    _check_guard(m)
    dim = 1 << m
    idx = np.arange(dim, dtype=np.int64)
    rows, cols, vals = [], [], []
    for p, q in zip(*np.nonzero(h)):
        p, q = int(p), int(q)
        src = idx[(idx >> q) & 1 == 1]
        mid = src ^ (1 << q)
        ok = (mid >> p) & 1 == 0
        src, mid = src[ok], mid[ok]
        dst = mid | (1 << p)
        sign = _below_sign(src, q) * _below_sign(mid, p)
        rows.append(dst)
        cols.append(src)
        vals.append(h[p, q] * sign)
    if not rows:
        return sp.csr_matrix((dim, dim), dtype=complex)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim, dim))
