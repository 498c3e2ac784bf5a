"""Number-preserving single-particle maps and lattice geometry.

Spinful lattices use site index i = y*lx + x, spin-up modes [0, L) and
spin-down modes [L, 2L) with L = lx*ly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ValidationError

UNITARY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class GaussianMap:
    """Single-particle matrix G acting as c†_j -> sum_i G_ij c†_i."""

    matrix: np.ndarray
    is_unitary: bool = False

    def __post_init__(self):
        g = np.array(self.matrix, dtype=complex)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValidationError(f"map matrix must be square, got {g.shape}")
        g.setflags(write=False)
        object.__setattr__(self, "matrix", g)
        if self.is_unitary:
            err = np.max(np.abs(g.conj().T @ g - np.eye(g.shape[0]))) if g.size else 0.0
            if err > UNITARY_TOL:
                raise ValidationError(
                    f"map flagged unitary but |G†G - I|_max = {err:.3e}")

    @classmethod
    def from_matrix(cls, matrix, check_unitary: bool = True) -> "GaussianMap":
        """Wrap a matrix, setting the unitary flag when it holds numerically."""
        g = np.asarray(matrix, dtype=complex)
        unitary = False
        if check_unitary and g.size:
            unitary = bool(np.max(np.abs(g.conj().T @ g - np.eye(g.shape[0]))) <= UNITARY_TOL)
        return cls(g, unitary)

    @classmethod
    def identity(cls, num_modes: int) -> "GaussianMap":
        return cls(np.eye(num_modes), True)

    @property
    def num_modes(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def op_norm(self) -> float:
        if self.is_unitary:
            return 1.0
        if self.matrix.size == 0:
            return 0.0
        return float(np.linalg.norm(self.matrix, 2))

    def adjoint(self) -> "GaussianMap":
        return GaussianMap(self.matrix.conj().T, self.is_unitary)

    def __matmul__(self, other: "GaussianMap") -> "GaussianMap":
        return compose(self, other)


def compose(left: GaussianMap, right: GaussianMap) -> GaussianMap:
    """Map acting as `right` first, then `left`."""
    if left.num_modes != right.num_modes:
        raise ValidationError(
            f"cannot compose maps on {left.num_modes} and {right.num_modes} modes")
    return GaussianMap(left.matrix @ right.matrix, left.is_unitary and right.is_unitary)


def diagonal_phase(thetas: Sequence[float]) -> GaussianMap:
    return GaussianMap(np.diag(np.exp(1j * np.asarray(thetas, dtype=float))), True)


def parity_map(num_modes: int, modes: Sequence[int]) -> GaussianMap:
    """Diagonal map flipping the sign of each mode in `modes`."""
    d = np.ones(num_modes)
    d[list(modes)] = -1.0
    return GaussianMap(np.diag(d).astype(complex), True)


def random_unitary(rng: np.random.Generator, num_modes: int) -> GaussianMap:
    z = (rng.normal(size=(num_modes, num_modes))
         + 1j * rng.normal(size=(num_modes, num_modes))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    q = q * (np.diag(r) / np.abs(np.diag(r)))[None, :]
    return GaussianMap(q, True)


@dataclass(frozen=True)
class Link:
    i: int
    j: int
    phi: float = 0.0


@dataclass(frozen=True)
class LatticeSpec:
    lx: int
    ly: int
    links: tuple[Link, ...] = ()
    hopping: float = 1.0
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.lx < 1 or self.ly < 1:
            raise ValidationError(f"lattice dimensions must be positive, got {self.lx}x{self.ly}")
        seen = set()
        for link in self.links:
            i, j = int(link.i), int(link.j)
            if not (0 <= i < self.num_sites and 0 <= j < self.num_sites) or i == j:
                raise ValidationError(f"link ({i},{j}) is not a pair of distinct lattice sites")
            (xi, yi), (xj, yj) = self.coords(i), self.coords(j)
            if abs(xi - xj) + abs(yi - yj) != 1:
                raise ValidationError(f"link ({i},{j}) does not join nearest neighbours")
            key = frozenset((i, j))
            if key in seen:
                raise ValidationError(f"link ({i},{j}) listed more than once")
            seen.add(key)

    @classmethod
    def rectangular(cls, lx: int, ly: int, hopping: float = 1.0) -> "LatticeSpec":
        """Open-boundary nearest-neighbour lattice with zero hopping phases."""
        links = []
        for y in range(ly):
            for x in range(lx):
                i = y * lx + x
                if x + 1 < lx:
                    links.append(Link(i, i + 1))
                if y + 1 < ly:
                    links.append(Link(i, i + lx))
        return cls(lx, ly, tuple(links), hopping, {"phases": "default-zero"})

    @property
    def num_sites(self) -> int:
        return self.lx * self.ly

    @property
    def num_modes(self) -> int:
        return 2 * self.num_sites

    def coords(self, site: int) -> tuple[int, int]:
        return site % self.lx, site // self.lx

    def up(self, site: int) -> int:
        return site

    def down(self, site: int) -> int:
        return self.num_sites + site

    def site_modes(self, site: int) -> tuple[int, int]:
        return self.up(site), self.down(site)

    def hopping_matrix(self, hopping: float | None = None) -> np.ndarray:
        """Hermitian one-body matrix h0 for -J sum (e^{i phi} c†_i c_j + h.c.), both spins."""
        n = self.num_sites
        hopping = self.hopping if hopping is None else hopping
        block = np.zeros((n, n), dtype=complex)
        for link in self.links:
            amp = -hopping * np.exp(1j * link.phi)
            block[link.i, link.j] += amp
            block[link.j, link.i] += np.conj(amp)
        h = np.zeros((2 * n, 2 * n), dtype=complex)
        h[:n, :n] = block
        h[n:, n:] = block
        return h

    def to_json(self) -> dict:
        return {"lx": self.lx, "ly": self.ly,
                "links": [{"i": l.i, "j": l.j, "phi": l.phi} for l in self.links],
                "J": self.hopping}

    @classmethod
    def from_json(cls, data: dict | str) -> "LatticeSpec":
        if isinstance(data, str):
            data = json.loads(data)
        lx, ly = int(data["lx"]), int(data["ly"])
        hopping = float(data.get("J", 1.0))
        if data.get("links") is None:
            return cls.rectangular(lx, ly, hopping)
        links = tuple(Link(int(l["i"]), int(l["j"]), float(l.get("phi", 0.0)))
                      for l in data["links"])
        defaulted = any("phi" not in l for l in data["links"])
        meta = {"phases": "default-zero" if defaulted else "explicit"}
        return cls(lx, ly, links, hopping, meta)


def _evolve_hermitian(h: np.ndarray, time: float) -> np.ndarray:
    evals, evecs = np.linalg.eigh(h)
    return (evecs * np.exp(-1j * time * evals)[None, :]) @ evecs.conj().T


def hopping_evolution(lattice: LatticeSpec, time: float, hopping: float | None = None) -> GaussianMap:
    """Exact free evolution exp(-i t h0) via eigendecomposition."""
    if not np.isfinite(time):
        raise ValidationError(f"time must be finite, got {time}")
    return GaussianMap(_evolve_hermitian(lattice.hopping_matrix(hopping), time), True)


def hirsch_lambda(interaction: float, dt: float) -> complex:
    """Principal-branch lambda with cosh(lambda) = exp(i W dt / 2)."""
    lam = complex(np.arccosh(np.exp(0.5j * interaction * dt)))
    # keep Re >= 0 so a(W, dt) varies continuously from 0 at W = 0
    if lam.real < 0:
        lam = -lam
    return lam


def hs_field_matrix(lam: complex, sigma: np.ndarray, num_sites: int) -> np.ndarray:
    """Diagonal of V(sigma): exp(-lam sigma_i) on up modes, exp(+lam sigma_i) on down."""
    sigma = np.asarray(sigma, dtype=float)
    return np.concatenate([np.exp(-lam * sigma), np.exp(lam * sigma)], axis=-1)


def hs_propagator(lattice: LatticeSpec, interaction: float, dt: float,
                  sigma_path: Sequence[Sequence[int]],
                  hopping: float | None = None) -> GaussianMap:
    """prod_l U_half V(sigma_l) U_half for an auxiliary-field path (first slice acts first)."""
    sigma_path = np.asarray(sigma_path)
    n_sites = lattice.num_sites
    if sigma_path.ndim != 2 or sigma_path.shape[1] != n_sites or sigma_path.shape[0] < 1:
        raise ValidationError(
            f"sigma path must have shape (slices, {n_sites}), got {sigma_path.shape}")
    if not np.all(np.isin(sigma_path, (-1, 1))):
        raise ValidationError("auxiliary fields must be +1 or -1")
    lam = hirsch_lambda(interaction, dt)
    half = _evolve_hermitian(lattice.hopping_matrix(hopping), dt / 2)
    g = np.eye(lattice.num_modes, dtype=complex)
    for sigma in sigma_path:
        v = hs_field_matrix(lam, sigma, n_sites)
        g = half @ (v[:, None] * half) @ g
    out = GaussianMap(g, False)
    bound = np.exp(abs(lam.real) * len(sigma_path))
    if out.op_norm > bound * (1 + 1e-9):
        raise ValidationError(
            f"propagator norm {out.op_norm:.6g} exceeds the bound {bound:.6g}")
    return out


def walker_propagator(lattice: LatticeSpec, interaction: float, dtau: float,
                      sigma_path: Sequence[Sequence[int]],
                      hopping: float | None = None) -> GaussianMap:
    """Imaginary-time auxiliary-field walker prod_l K_half V(sigma_l) K_half.

    K_half = exp(-dtau h0 / 2) and V uses the real coupling with
    cosh(lambda) = exp(dtau W / 2).
    """
    sigma_path = np.asarray(sigma_path)
    n_sites = lattice.num_sites
    if sigma_path.ndim != 2 or sigma_path.shape[1] != n_sites or sigma_path.shape[0] < 1:
        raise ValidationError(
            f"sigma path must have shape (slices, {n_sites}), got {sigma_path.shape}")
    if not np.all(np.isin(sigma_path, (-1, 1))):
        raise ValidationError("auxiliary fields must be +1 or -1")
    if dtau <= 0:
        raise ValidationError(f"imaginary time step must be positive, got {dtau}")
    lam = float(np.arccosh(np.exp(0.5 * interaction * dtau))) if interaction >= 0 else \
        complex(np.arccosh(np.exp(0.5 * interaction * dtau)))
    evals, evecs = np.linalg.eigh(lattice.hopping_matrix(hopping))
    half = (evecs * np.exp(-0.5 * dtau * evals)[None, :]) @ evecs.conj().T
    g = np.eye(lattice.num_modes, dtype=complex)
    for sigma in sigma_path:
        v = hs_field_matrix(lam, sigma, n_sites)
        g = half @ (v[:, None] * half) @ g
    return GaussianMap(g, False)
