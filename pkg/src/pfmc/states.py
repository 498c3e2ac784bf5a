"""Fock basis states and block-product paired (APSG) states.

Basis convention: the Fock state with occupied modes i1 < i2 < ... < ik is
c†_{i1} c†_{i2} ... c†_{ik}|0>.  In dense vectors the index bit i is mode i.

A block holds 2r mode indices; pair slot j creates c†_{modes[2j]} c†_{modes[2j+1]}
in that operator order, so the block operator is

    eta† = sum_j w_j c†_{a_j} c†_{b_j} = 1/2 sum_pq W_pq c†_p c†_q

with W[a_j, b_j] = w_j and W[b_j, a_j] = -w_j.  Slot order inside a pair is
therefore meaningful: swapping a_j and b_j flips the sign of that slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, ValidationError

NORM_TOL = 1e-10
STATEVECTOR_GUARD = 20
SLOT_ENUMERATION_GUARD = 1 << 20


@dataclass(frozen=True)
class FockState:
    num_modes: int
    occupied: tuple[int, ...]

    def __post_init__(self):
        occ = tuple(sorted(int(i) for i in self.occupied))
        if len(set(occ)) != len(occ):
            raise ValidationError(f"repeated mode in occupation {self.occupied}")
        if occ and (occ[0] < 0 or occ[-1] >= self.num_modes):
            raise ValidationError(
                f"occupied modes {occ} outside [0, {self.num_modes})")
        object.__setattr__(self, "occupied", occ)

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "FockState":
        return cls(len(bits), tuple(i for i, b in enumerate(bits) if b))

    @classmethod
    def from_index(cls, num_modes: int, index: int) -> "FockState":
        return cls(num_modes, tuple(i for i in range(num_modes) if index >> i & 1))

    @property
    def particle_number(self) -> int:
        return len(self.occupied)

    @property
    def bits(self) -> np.ndarray:
        out = np.zeros(self.num_modes, dtype=np.int8)
        out[list(self.occupied)] = 1
        return out

    @property
    def index(self) -> int:
        return sum(1 << i for i in self.occupied)


@dataclass(frozen=True)
class ApsgBlock:
    """One geminal: pair slots over a private set of modes."""

    mode_indices: tuple[int, ...]
    weights: tuple[complex, ...]

    def __post_init__(self):
        modes = tuple(int(m) for m in self.mode_indices)
        weights = tuple(complex(w) for w in self.weights)
        if len(modes) != 2 * len(weights) or not weights:
            raise ValidationError(
                f"block needs 2r modes for r weights, got {len(modes)} modes "
                f"and {len(weights)} weights")
        if len(set(modes)) != len(modes):
            raise ValidationError(f"repeated mode inside block {modes}")
        norm = sum(abs(w) ** 2 for w in weights)
        if abs(norm - 1.0) > NORM_TOL:
            raise ValidationError(
                f"block weights must have unit 2-norm, got sum |w|^2 = {norm!r}")
        object.__setattr__(self, "mode_indices", modes)
        object.__setattr__(self, "weights", weights)

    @property
    def rank(self) -> int:
        return len(self.weights)

    def slot(self, j: int) -> tuple[int, int]:
        return self.mode_indices[2 * j], self.mode_indices[2 * j + 1]

    @property
    def max_weight(self) -> float:
        return max(abs(w) for w in self.weights)

    def pair_matrix(self, num_modes: int) -> np.ndarray:
        w = np.zeros((num_modes, num_modes), dtype=complex)
        for j, val in enumerate(self.weights):
            a, b = self.slot(j)
            w[a, b] += val
            w[b, a] -= val
        return w


@dataclass(frozen=True)
class ApsgState:
    num_modes: int
    blocks: tuple[ApsgBlock, ...]
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        seen: set[int] = set()
        for t, blk in enumerate(blocks):
            overlap = seen.intersection(blk.mode_indices)
            if overlap:
                raise ValidationError(
                    f"block {t} shares modes {sorted(overlap)} with an earlier block")
            seen.update(blk.mode_indices)
        if seen and (min(seen) < 0 or max(seen) >= self.num_modes):
            raise ValidationError(
                f"block modes outside [0, {self.num_modes})")
        object.__setattr__(self, "blocks", blocks)

    @property
    def num_pairs(self) -> int:
        return len(self.blocks)

    @property
    def particle_number(self) -> int:
        return 2 * len(self.blocks)

    @property
    def gamma(self) -> float:
        return float(np.prod([b.max_weight for b in self.blocks])) if self.blocks else 1.0

    def slot_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flattened slot tables: (first modes, second modes, weights, block id)."""
        a, b, w, owner = [], [], [], []
        for t, blk in enumerate(self.blocks):
            for j in range(blk.rank):
                p, q = blk.slot(j)
                a.append(p)
                b.append(q)
                w.append(blk.weights[j])
                owner.append(t)
        return (np.array(a, dtype=np.intp), np.array(b, dtype=np.intp),
                np.array(w, dtype=complex), np.array(owner, dtype=np.intp))

    def to_json(self) -> dict:
        return {
            "num_modes": self.num_modes,
            "blocks": [
                {"modes": list(b.mode_indices),
                 "weights": [[w.real, w.imag] for w in b.weights]}
                for b in self.blocks
            ],
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "ApsgState":
        if isinstance(data, str):
            data = json.loads(data)
        try:
            blocks = tuple(
                ApsgBlock(tuple(b["modes"]),
                          tuple(_parse_complex(w) for w in b["weights"]))
                for b in data["blocks"])
            return cls(int(data["num_modes"]), blocks)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed APSG state JSON: {exc}") from exc


def _parse_complex(w) -> complex:
    if isinstance(w, (list, tuple)):
        if len(w) != 2:
            raise ValidationError(f"complex weight must be [re, im], got {w}")
        return complex(float(w[0]), float(w[1]))
    return complex(w)


def psi4_product(num_blocks: int) -> ApsgState:
    """N copies of (|1100> + |0011>)/sqrt(2) on consecutive 4-mode groups."""
    if num_blocks < 1:
        raise ValidationError(f"need at least one block, got {num_blocks}")
    h = 1 / math.sqrt(2)
    blocks = tuple(ApsgBlock(tuple(range(4 * t, 4 * t + 4)), (h, h))
                   for t in range(num_blocks))
    return ApsgState(4 * num_blocks, blocks)


def random_apsg(rng: np.random.Generator, num_modes: int, ranks: Sequence[int]) -> ApsgState:
    """Random block-product state with the given slot counts per block."""
    need = 2 * sum(ranks)
    if need > num_modes:
        raise ValidationError(f"{need} modes needed, only {num_modes} available")
    perm = rng.permutation(num_modes)
    blocks = []
    pos = 0
    for r in ranks:
        modes = tuple(int(m) for m in perm[pos:pos + 2 * r])
        pos += 2 * r
        w = rng.normal(size=r) + 1j * rng.normal(size=r)
        w /= np.linalg.norm(w)
        blocks.append(ApsgBlock(modes, tuple(w)))
    return ApsgState(num_modes, tuple(blocks))


def ordered_sign(modes: Sequence[int]) -> int:
    """Sign of the permutation sorting `modes` (which must be distinct)."""
    arr = list(modes)
    sign = 1
    for i in range(len(arr)):
        for j in range(i + 1, len(arr)):
            if arr[i] > arr[j]:
                sign = -sign
    return sign


def slot_patterns(psi: ApsgState) -> Iterable[tuple[tuple[int, ...], complex, list[int]]]:
    """Yield (slot choice, weight product, creation-ordered modes) for each term."""
    for choice in product(*(range(b.rank) for b in psi.blocks)):
        weight = 1.0 + 0j
        modes: list[int] = []
        for blk, j in zip(psi.blocks, choice):
            weight *= blk.weights[j]
            modes.extend(blk.slot(j))
        yield choice, weight, modes


def num_slot_patterns(psi: ApsgState) -> int:
    return math.prod(b.rank for b in psi.blocks)


def apsg_to_statevector(psi: ApsgState) -> np.ndarray:
    """Dense amplitudes of prod_t eta_t†|0> over all 2^M basis states."""
    if psi.num_modes > STATEVECTOR_GUARD:
        raise CapacityError(
            f"{psi.num_modes} modes exceeds the statevector guard {STATEVECTOR_GUARD}",
            guard=STATEVECTOR_GUARD)
    vec = np.zeros(1 << psi.num_modes, dtype=complex)
    for _, weight, modes in slot_patterns(psi):
        idx = sum(1 << m for m in modes)
        vec[idx] += ordered_sign(modes) * weight
    return vec


def oracle_amplitude(bra: FockState, g, psi: ApsgState) -> complex:
    """Exact <x|G|Psi> by summing determinants over all slot choices.

    For each slot choice the ket term is a product of creation operators in
    block order; G maps it to a product of rotated creators whose overlap with
    the ordered bra is det(G[rows, cols]) times the sort sign of the columns.
    """
    matrix = _matrix_of(g)
    if bra.num_modes != psi.num_modes or matrix.shape != (psi.num_modes,) * 2:
        raise ValidationError("bra, map and state must share the mode count")
    if bra.particle_number != psi.particle_number:
        return 0j
    count = num_slot_patterns(psi)
    if count > SLOT_ENUMERATION_GUARD:
        raise CapacityError(
            f"{count} slot patterns exceeds the enumeration guard "
            f"{SLOT_ENUMERATION_GUARD}", guard=SLOT_ENUMERATION_GUARD)
    rows = list(bra.occupied)
    total = 0j
    for _, weight, modes in slot_patterns(psi):
        cols = sorted(modes)
        total += weight * ordered_sign(modes) * np.linalg.det(matrix[np.ix_(rows, cols)])
    return complex(total)


def _matrix_of(g) -> np.ndarray:
    return np.asarray(getattr(g, "matrix", g), dtype=complex)
