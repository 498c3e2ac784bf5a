"""Dense skew-symmetric linear algebra.

Pfaffians are evaluated by Parlett-Reid style tridiagonalization with
partial pivoting, vectorized over a leading batch axis so that Monte Carlo
drivers can push thousands of small matrices through one call.  The two
enumerative routines at the bottom (`mixed_pfaffian_exact` and
`wedge_top_coefficient_oracle`) are exponential-cost references used by the
test suite; they share no code path with each other.
"""

from __future__ import annotations

from itertools import product
from typing import Sequence

import numpy as np

from .errors import CapacityError, ValidationError

TOL_SKEW = 1e-12
MIXED_ENUMERATION_GUARD = 24
WEDGE_GUARD = 8


def as_skew(a, name: str = "matrix") -> np.ndarray:
    """Validate `a` as a square skew-symmetric matrix and symmetrize it.

    The asymmetry tolerance is relative to the largest entry.  On failure the
    error names the worst-violating entry pair.
    """
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {a.shape}")
    if a.size == 0:
        return a.copy()
    scale = max(1.0, float(np.max(np.abs(a))))
    resid = np.abs(a + a.T)
    worst = np.unravel_index(np.argmax(resid), resid.shape)
    if resid[worst] > TOL_SKEW * scale:
        p, q = (int(i) for i in worst)
        raise ValidationError(
            f"{name} is not skew-symmetric: |A[{p},{q}] + A[{q},{p}]| = "
            f"{resid[worst]:.3e} exceeds tolerance {TOL_SKEW * scale:.3e}"
        )
    return 0.5 * (a - a.T)


def pair_form(u, v) -> np.ndarray:
    """Rank-2 skew matrix u v^T - v u^T."""
    u = np.asarray(u, dtype=complex)
    v = np.asarray(v, dtype=complex)
    if u.shape != v.shape or u.ndim != 1:
        raise ValidationError("pair_form needs two vectors of equal length")
    return np.outer(u, v) - np.outer(v, u)


def pfaffian(a) -> complex:
    """Pfaffian of a single skew-symmetric matrix (odd dimension gives 0)."""
    a = as_skew(a)
    return complex(pfaffian_batch(a[None])[0])


def pfaffian_batch(a: np.ndarray) -> np.ndarray:
    """Pfaffians of a stack of skew matrices with shape (..., n, n).

    No validation is done here; callers are expected to pass exactly
    antisymmetric arrays.  Dimensions up to 4 use the closed-form matching
    sums, larger ones the pivoted tridiagonalization.
    """
    a = np.asarray(a)
    n = a.shape[-1]
    batch_shape = a.shape[:-2]
    if n % 2 == 1:
        return np.zeros(batch_shape, dtype=complex)
    if n == 0:
        return np.ones(batch_shape, dtype=complex)
    if n == 2:
        return a[..., 0, 1].astype(complex)
    if n == 4:
        return (a[..., 0, 1] * a[..., 2, 3] - a[..., 0, 2] * a[..., 1, 3]
                + a[..., 0, 3] * a[..., 1, 2]).astype(complex)
    flat = np.array(a.reshape((-1, n, n)), dtype=complex)
    return _parlett_reid(flat).reshape(batch_shape)


def _parlett_reid(a: np.ndarray) -> np.ndarray:
    # a is (b, n, n), modified in place
    nb, n, _ = a.shape
    rows = np.arange(nb)
    result = np.ones(nb, dtype=complex)
    for k in range(0, n - 1, 2):
        col = np.abs(a[:, k + 1:, k])
        kp = k + 1 + np.argmax(col, axis=1)
        swap = kp != k + 1
        if np.any(swap):
            s = rows[swap]
            kps = kp[swap]
            tmp = a[s, k + 1, :].copy()
            a[s, k + 1, :] = a[s, kps, :]
            a[s, kps, :] = tmp
            tmp = a[s, :, k + 1].copy()
            a[s, :, k + 1] = a[s, :, kps]
            a[s, :, kps] = tmp
            result[swap] *= -1
        piv = a[:, k, k + 1]
        zero = piv == 0
        result *= piv
        if k + 2 < n:
            safe = np.where(zero, 1.0, piv)
            tau = a[:, k, k + 2:] / safe[:, None]
            colk1 = a[:, k + 2:, k + 1]
            a[:, k + 2:, k + 2:] += (tau[:, :, None] * colk1[:, None, :]
                                     - colk1[:, :, None] * tau[:, None, :])
    return result


def congruence(a, x) -> np.ndarray:
    """Return X^T A X, symmetrized to be exactly skew.

    X may be rectangular (a restriction to a subset of modes).
    """
    a = as_skew(a)
    x = np.asarray(x, dtype=complex)
    if x.ndim != 2 or x.shape[0] != a.shape[0]:
        raise ValidationError(
            f"congruence shape mismatch: A is {a.shape}, X is {x.shape}")
    out = x.T @ a @ x
    return 0.5 * (out - out.T)


def mixed_pfaffian_exact(blocks: Sequence) -> complex:
    """Coefficient of y_1...y_N in pf(sum_t y_t B_t), by full sign averaging.

    Averages pf(sum_t b_t B_t) * prod_t b_t over all 2^N sign vectors.
    """
    mats = [as_skew(b, name=f"block {i}") for i, b in enumerate(blocks)]
    n_blocks = len(mats)
    if n_blocks == 0:
        return 1.0 + 0j
    if n_blocks > MIXED_ENUMERATION_GUARD:
        raise CapacityError(
            f"{n_blocks} blocks exceeds the enumeration guard "
            f"{MIXED_ENUMERATION_GUARD}; use the Monte Carlo estimator",
            guard=MIXED_ENUMERATION_GUARD)
    dim = mats[0].shape[0]
    if any(m.shape[0] != dim for m in mats) or dim != 2 * n_blocks:
        raise ValidationError(
            f"all blocks must be {2 * n_blocks}x{2 * n_blocks} for {n_blocks} blocks")
    stack = np.stack(mats)
    total = 0j
    # chunk over sign vectors to bound memory
    signs_all = np.array(list(product((1.0, -1.0), repeat=n_blocks)))
    for start in range(0, len(signs_all), 4096):
        signs = signs_all[start:start + 4096]
        summed = np.einsum("kt,tpq->kpq", signs, stack)
        total += np.sum(pfaffian_batch(summed) * np.prod(signs, axis=1))
    return complex(total / 2 ** n_blocks)


def _wedge_form(coeffs: np.ndarray, form: np.ndarray) -> np.ndarray:
    """Right-multiply an exterior-algebra element by the 2-form of `form`.

    Elements are dense arrays indexed by bitmask of basis vectors, stored
    with coefficients of the ascending-ordered monomials.
    """
    dim = form.shape[0]
    masks = np.arange(coeffs.size)
    out = np.zeros_like(coeffs)
    nz = np.nonzero(coeffs)[0]
    if nz.size == 0:
        return out
    m = masks[nz]
    c = coeffs[nz]
    for p in range(dim):
        bp = 1 << p
        for q in range(p + 1, dim):
            a_pq = form[p, q]
            if a_pq == 0:
                continue
            bq = 1 << q
            ok = (m & (bp | bq)) == 0
            if not np.any(ok):
                continue
            mm = m[ok]
            # moving e_p then e_q from the right end into ascending position
            above_p = _popcount(mm >> (p + 1))
            above_q = _popcount(mm >> (q + 1))
            sign = np.where((above_p + above_q) % 2 == 0, 1.0, -1.0)
            # alpha(A) = 1/2 sum A_pq e_p^e_q = sum_{p<q} A_pq e_p^e_q
            np.add.at(out, mm | bp | bq, sign * a_pq * c[ok])
    return out


def _popcount(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    count = np.zeros_like(x)
    while np.any(x):
        count += x & 1
        x = x >> 1
    return count


def wedge_top_coefficient_oracle(forms: Sequence) -> complex:
    """Top-form coefficient of alpha(B_1) ^ ... ^ alpha(B_N).

    Works directly in the exterior algebra of C^{2N}; exponential in N.
    """
    mats = [as_skew(f, name=f"form {i}") for i, f in enumerate(forms)]
    n_forms = len(mats)
    if n_forms == 0:
        return 1.0 + 0j
    if n_forms > WEDGE_GUARD:
        raise CapacityError(
            f"{n_forms} forms exceeds the exterior-algebra guard {WEDGE_GUARD}",
            guard=WEDGE_GUARD)
    dim = mats[0].shape[0]
    if any(m.shape[0] != dim for m in mats) or dim != 2 * n_forms:
        raise ValidationError(
            f"all forms must be {2 * n_forms}x{2 * n_forms} for {n_forms} forms")
    coeffs = np.zeros(1 << dim, dtype=complex)
    coeffs[0] = 1.0
    for m in mats:
        coeffs = _wedge_form(coeffs, m)
    return complex(coeffs[(1 << dim) - 1])


def pfaffian_bound(a) -> float:
    """Operator-norm bound ||A||_op^{n/2} on |pf(A)|."""
    a = np.asarray(a)
    if a.shape[0] == 0:
        return 1.0
    return float(np.linalg.norm(a, 2) ** (a.shape[0] // 2))


def random_skew(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Random complex skew matrix with standard normal entries."""
    z = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return z - z.T


__all__ = [
    "TOL_SKEW", "as_skew", "pair_form", "pfaffian", "pfaffian_batch",
    "congruence", "mixed_pfaffian_exact", "wedge_top_coefficient_oracle",
    "pfaffian_bound", "random_skew",
]
