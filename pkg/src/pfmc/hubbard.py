"""Spinful Fermi-Hubbard quench diagnostics.

Initial states are coverings of the lattice by nearest-neighbour spin-triplet
dimers (c†_{j up} c†_{k down} + c†_{j down} c†_{k up})|0>/sqrt(2), with optional
empty (holon) and doubly occupied (doublon) sites.  Each dimer is one
two-slot block; each doublon is a one-slot block on (j up, j down).

At W = 0 evolution is exact free-fermion dynamics; at W > 0 it is
Strang-split into k slices and every estimator runs on auxiliary-field
kernels, with sample budgets set by the worst-case path envelope.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.linalg import expm_multiply

from . import fock
from .errors import ValidationError
from .estimators import (Estimate, Middle, Mixture, OneShot, ProductShot, ZeroShot,
                         TransitionKernel, hs_bounds, hs_kernel, hoeffding_samples,
                         run_shots, wilson_shot)
from .maps import LatticeSpec, hirsch_lambda, hopping_evolution
from .states import ApsgBlock, ApsgState, apsg_to_statevector

TRIPLET_WEIGHT = 1 / math.sqrt(2)


@dataclass(frozen=True)
class QuenchConfig:
    lattice: LatticeSpec
    dimers: tuple[tuple[int, int], ...] = ()
    holons: tuple[int, ...] = ()
    doublons: tuple[int, ...] = ()
    interaction: float = 0.0
    times: tuple[float, ...] = (0.0,)
    trotter_steps: int = 4
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        dimers = tuple((int(j), int(k)) for j, k in self.dimers)
        object.__setattr__(self, "dimers", dimers)
        object.__setattr__(self, "holons", tuple(int(i) for i in self.holons))
        object.__setattr__(self, "doublons", tuple(int(i) for i in self.doublons))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        lat = self.lattice
        used: list[int] = [s for d in dimers for s in d] + list(self.holons) + list(self.doublons)
        if len(set(used)) != len(used):
            dup = sorted({s for s in used if used.count(s) > 1})
            raise ValidationError(f"sites {dup} are assigned more than once")
        if set(used) != set(range(lat.num_sites)):
            missing = sorted(set(range(lat.num_sites)) - set(used))
            extra = sorted(set(used) - set(range(lat.num_sites)))
            raise ValidationError(
                f"dimers, holons and doublons must partition the sites; "
                f"missing {missing}, out of range {extra}")
        for j, k in dimers:
            (xj, yj), (xk, yk) = lat.coords(j), lat.coords(k)
            if abs(xj - xk) + abs(yj - yk) != 1:
                raise ValidationError(f"dimer ({j},{k}) is not a nearest-neighbour pair")
        if self.trotter_steps < 1:
            raise ValidationError(f"trotter_steps must be positive, got {self.trotter_steps}")
        if any(t < 0 or not math.isfinite(t) for t in self.times):
            raise ValidationError(f"times must be finite and nonnegative, got {self.times}")

    @property
    def hopping(self) -> float:
        return self.lattice.hopping

    @classmethod
    def from_json(cls, data: dict | str) -> "QuenchConfig":
        if isinstance(data, str):
            data = json.loads(data)
        lattice = LatticeSpec.from_json(data["lattice"])
        if "J" in data:
            lattice = LatticeSpec(lattice.lx, lattice.ly, lattice.links, float(data["J"]),
                                  lattice.meta)
        return cls(lattice,
                   tuple(tuple(d) for d in data.get("dimers", [])),
                   tuple(data.get("holons", [])),
                   tuple(data.get("doublons", [])),
                   float(data.get("W", 0.0)),
                   tuple(data.get("times", [0.0])),
                   int(data.get("trotter_k", 4)))

    def to_json(self) -> dict:
        return {"lattice": self.lattice.to_json(), "dimers": [list(d) for d in self.dimers],
                "holons": list(self.holons), "doublons": list(self.doublons),
                "J": self.hopping, "W": self.interaction, "times": list(self.times),
                "trotter_k": self.trotter_steps}


def build_initial_state(cfg: QuenchConfig) -> ApsgState:
    lat = cfg.lattice
    blocks = []
    for j, k in cfg.dimers:
        modes = (lat.up(j), lat.down(k), lat.down(j), lat.up(k))
        blocks.append(ApsgBlock(modes, (TRIPLET_WEIGHT, TRIPLET_WEIGHT)))
    for j in cfg.doublons:
        blocks.append(ApsgBlock((lat.up(j), lat.down(j)), (1.0,)))
    meta = {"doublon_representation": "single-slot block (j up, j down)",
            "hopping_phases": lat.meta.get("phases", "explicit")}
    return ApsgState(lat.num_modes, tuple(blocks), meta)


def lattice_links(cfg: QuenchConfig) -> list[tuple[int, int]]:
    return [(l.i, l.j) for l in cfg.lattice.links]


# ---------------------------------------------------------------------------
# kernels and one-shots


class ParityCombinationMiddle(Middle):
    """Middle for sum_k c_k (-1)^{n(T_k)}: picks k with probability |c_k| / sum |c|."""

    def __init__(self, num_modes: int, terms: Sequence[tuple[float, Sequence[int]]]):
        self.num_modes = num_modes
        self.coefs = np.array([c for c, _ in terms], dtype=float)
        self.diags = np.ones((len(terms), num_modes), dtype=complex)
        for row, (_, modes) in enumerate(terms):
            self.diags[row, list(modes)] = -1
        self.coef_bound = float(np.abs(self.coefs).sum())
        self.probs = np.abs(self.coefs) / self.coef_bound

    def sample(self, rng, n):
        pick = rng.choice(len(self.coefs), size=n, p=self.probs)
        coef = self.coef_bound * np.sign(self.coefs[pick])
        return "diag", self.diags[pick], coef.astype(complex)


def quench_kernel(cfg: QuenchConfig, time: float, psi: ApsgState | None = None) -> TransitionKernel:
    psi = build_initial_state(cfg) if psi is None else psi
    if cfg.interaction == 0 or time == 0:
        u = hopping_evolution(cfg.lattice, time)
        return TransitionKernel(u, u, psi, psi)
    dt = time / cfg.trotter_steps
    return hs_kernel(cfg.lattice, cfg.interaction, dt, cfg.trotter_steps, psi)


def doublon_shot(cfg: QuenchConfig, kernel: TransitionKernel) -> OneShot:
    lat = cfg.lattice
    return Mixture([(1.0, kernel.number_product(lat.site_modes(i)))
                    for i in range(lat.num_sites)])


def spin_difference_shot(cfg: QuenchConfig, kernel: TransitionKernel, site: int) -> OneShot:
    """<n_up - n_down> = <(-1)^{n_down} - (-1)^{n_up}> / 2."""
    up, down = cfg.lattice.site_modes(site)
    return kernel.shot(ParityCombinationMiddle(kernel.num_modes, [(0.5, [down]), (-0.5, [up])]))


def spin_product_shot(cfg: QuenchConfig, kernel: TransitionKernel, i: int, j: int) -> OneShot:
    """<(n_i up - n_i down)(n_j up - n_j down)> as four signed parity strings."""
    ui, di = cfg.lattice.site_modes(i)
    uj, dj = cfg.lattice.site_modes(j)
    terms = [(0.25, [di, dj]), (-0.25, [di, uj]), (-0.25, [ui, dj]), (0.25, [ui, uj])]
    return kernel.shot(ParityCombinationMiddle(kernel.num_modes, terms))


def czz_shot(cfg: QuenchConfig, kernel: TransitionKernel, i: int, j: int) -> OneShot:
    """4(<Sz_i Sz_j> - <Sz_i><Sz_j>) with the disconnected part from independent one-shots."""
    if i == j:
        raise ValidationError("the connected spin correlator needs two distinct sites")
    for s in (i, j):
        if not 0 <= s < cfg.lattice.num_sites:
            raise ValidationError(f"site {s} outside the lattice")
    if kernel.num_pairs == 0:
        # the evolved state is the vacuum, where every spin density vanishes
        return ZeroShot()
    disconnected = ProductShot(spin_difference_shot(cfg, kernel, i),
                               spin_difference_shot(cfg, kernel, j))
    return Mixture([(1.0, spin_product_shot(cfg, kernel, i, j)), (-1.0, disconnected)])


def triplet_shot(cfg: QuenchConfig, kernel: TransitionKernel) -> OneShot:
    scale = 2.0 / cfg.lattice.num_sites
    return Mixture([(scale, czz_shot(cfg, kernel, i, j)) for i, j in lattice_links(cfg)])


def particle_number_shot(cfg: QuenchConfig, kernel: TransitionKernel) -> OneShot:
    return Mixture([(1.0, kernel.number_product([m])) for m in range(kernel.num_modes)])


def _run(cfg: QuenchConfig, time: float, shot: OneShot, kernel: TransitionKernel, eps, delta,
         seed, method: str, meta: dict, **opts) -> Estimate:
    opts.setdefault("real", True)
    meta = dict(meta, time=time, W=cfg.interaction)
    if cfg.interaction != 0 and time != 0:
        env = hs_bounds(cfg.interaction, time / cfg.trotter_steps, cfg.trotter_steps,
                        cfg.lattice.num_sites, kernel.num_pairs)
        opts.setdefault("aggregation", "mean")
        opts.setdefault("bound_override", shot.bound * env["B_worst"] / env["B_rigorous"])
        meta.update(env, envelope="worst")
    return run_shots(shot, eps, delta, seed, method=method, meta=meta, **opts)


def doublon_number(cfg: QuenchConfig, time: float, eps: float, delta: float, seed: int,
                   **opts) -> Estimate:
    """N_d(t) = sum_i <n_i up n_i down>, one mixture over sites."""
    kernel = quench_kernel(cfg, time)
    return _run(cfg, time, doublon_shot(cfg, kernel), kernel, eps, delta, seed,
                "doublon-number", {}, **opts)


def spin_correlator_czz(cfg: QuenchConfig, i: int, j: int, time: float, eps: float,
                        delta: float, seed: int, **opts) -> Estimate:
    kernel = quench_kernel(cfg, time)
    return _run(cfg, time, czz_shot(cfg, kernel, i, j), kernel, eps, delta, seed,
                "czz", {"sites": [i, j]}, **opts)


def triplet_density(cfg: QuenchConfig, time: float, eps: float, delta: float, seed: int,
                    **opts) -> Estimate:
    """(2/L) sum over lattice links of C_zz."""
    kernel = quench_kernel(cfg, time)
    return _run(cfg, time, triplet_shot(cfg, kernel), kernel, eps, delta, seed,
                "triplet-density", {"links": len(lattice_links(cfg))}, **opts)


def wilson_loop(cfg: QuenchConfig, contour: Sequence[int], time: float, eps: float,
                delta: float, seed: int, **opts) -> Estimate:
    kernel = quench_kernel(cfg, time)
    shot = wilson_shot(kernel, contour, cfg.lattice.num_sites)
    return _run(cfg, time, shot, kernel, eps, delta, seed, "wilson",
                {"contour": list(contour)}, **opts)


def particle_number(cfg: QuenchConfig, time: float, eps: float, delta: float, seed: int,
                    **opts) -> Estimate:
    kernel = quench_kernel(cfg, time)
    return _run(cfg, time, particle_number_shot(cfg, kernel), kernel, eps, delta, seed,
                "particle-number", {}, **opts)


# ---------------------------------------------------------------------------
# sample-complexity envelopes


@dataclass(frozen=True)
class WilsonComplexity:
    hoeffding: int
    calibrated: float


def wilson_sample_complexity(contour_len: int, eps: float, delta: float) -> WilsonComplexity:
    """Hoeffding budget with B^2 = (4/3)^|C| and the perimeter-scaled calibration point.

    The calibration anchors 10^3 samples at |C| = 22 and scales by (4/3) per site.
    """
    if contour_len <= 0:
        raise ValidationError(f"contour length must be positive, got {contour_len}")
    bound = (2 / math.sqrt(3)) ** contour_len
    return WilsonComplexity(hoeffding_samples(bound, eps, delta),
                            1e3 * (4 / 3) ** (contour_len - 22))


@dataclass(frozen=True)
class ComplexityEnvelope:
    """Envelope scales; a budget that does not fit in a float is math.inf."""

    B_worst: float
    B_typ: float
    K_worst: float
    K_typ: float
    a: float


def _safe_exp(x: float) -> float:
    return math.exp(x) if x < 709 else math.inf


def hs_complexity_envelope(interaction: float, time: float, dt: float, num_sites: int,
                           pfaffian_dim: int, c_t: float = 1.0, eps: float = 0.01,
                           delta: float = 0.01) -> ComplexityEnvelope:
    """Worst-case and typical one-shot scales and their Hoeffding budgets.

    B_worst = C_T exp(2 |a| n r) with n = t/dt, B_typ = exp(c |a| L sqrt(t/dt)),
    c = sqrt(2/pi), a = Re(lambda).
    """
    if dt <= 0:
        raise ValidationError(f"time step must be positive, got {dt}")
    if time < 0:
        raise ValidationError(f"time must be nonnegative, got {time}")
    a = abs(hirsch_lambda(interaction, dt).real)
    n = time / dt
    b_worst = c_t * _safe_exp(2 * a * n * pfaffian_dim)
    b_typ = _safe_exp(math.sqrt(2 / math.pi) * a * num_sites * math.sqrt(n))
    return ComplexityEnvelope(b_worst, b_typ, hoeffding_samples(b_worst, eps, delta),
                              hoeffding_samples(b_typ, eps, delta), a)


# ---------------------------------------------------------------------------
# dense reference


def interaction_diagonal(num_sites: int, interaction: float) -> np.ndarray:
    occ = fock.occupations(2 * num_sites)
    return interaction * np.sum(occ[:, :num_sites] * occ[:, num_sites:], axis=1)


def oracle_state(cfg: QuenchConfig, time: float) -> np.ndarray:
    """Dense |Psi(t)>: exact free evolution at W = 0, Strang-split evolution otherwise.

    Both paths exponentiate the many-body Hamiltonian directly on the Fock
    space, independent of the single-particle machinery.
    """
    lat = cfg.lattice
    vec = apsg_to_statevector(build_initial_state(cfg))
    h0 = fock.one_body_sparse(lat.hopping_matrix())
    if cfg.interaction == 0 or time == 0:
        return expm_multiply(-1j * time * h0, vec)
    dt = time / cfg.trotter_steps
    phase = np.exp(-1j * dt * interaction_diagonal(lat.num_sites, cfg.interaction))
    for _ in range(cfg.trotter_steps):
        vec = expm_multiply(-0.5j * dt * h0, vec)
        vec = phase * vec
        vec = expm_multiply(-0.5j * dt * h0, vec)
    return vec


def _expect(vec: np.ndarray, op) -> float:
    return float(np.real(np.vdot(vec, op(vec))))


def oracle_doublon_number(cfg: QuenchConfig, time: float) -> float:
    vec = oracle_state(cfg, time)
    lat = cfg.lattice
    return sum(_expect(vec, fock.number_product(lat.site_modes(i))) for i in range(lat.num_sites))


def _sz2(lat: LatticeSpec, site: int):
    up, down = lat.site_modes(site)
    return fock.diagonal_operator(lambda occ: (occ[:, up] - occ[:, down]).astype(float))


def oracle_czz_from_state(cfg: QuenchConfig, vec: np.ndarray, i: int, j: int) -> float:
    lat = cfg.lattice
    si, sj = _sz2(lat, i), _sz2(lat, j)
    return _expect(vec, fock.product_operator(si, sj)) - _expect(vec, si) * _expect(vec, sj)


def oracle_czz(cfg: QuenchConfig, i: int, j: int, time: float) -> float:
    return oracle_czz_from_state(cfg, oracle_state(cfg, time), i, j)


def oracle_triplet_density(cfg: QuenchConfig, time: float) -> float:
    vec = oracle_state(cfg, time)
    total = sum(oracle_czz_from_state(cfg, vec, i, j) for i, j in lattice_links(cfg))
    return 2.0 / cfg.lattice.num_sites * total


def oracle_wilson_loop(cfg: QuenchConfig, contour: Sequence[int], time: float) -> float:
    vec = oracle_state(cfg, time)
    return _expect(vec, fock.wilson_loop(contour, cfg.lattice.num_sites))


def oracle_parity(cfg: QuenchConfig, modes: Sequence[int], time: float) -> float:
    return _expect(oracle_state(cfg, time), fock.parity_string(modes))


__all__ = [
    "QuenchConfig", "build_initial_state", "quench_kernel", "doublon_number",
    "spin_correlator_czz", "triplet_density", "wilson_loop", "particle_number",
    "WilsonComplexity", "wilson_sample_complexity", "ComplexityEnvelope",
    "hs_complexity_envelope", "oracle_state", "oracle_doublon_number", "oracle_czz",
    "oracle_triplet_density", "oracle_wilson_loop", "oracle_parity",
]
