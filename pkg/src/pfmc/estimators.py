"""Mixed-Pfaffian Monte Carlo estimators.

Every estimator here is a mean of single-shot random variables of the form

    Z = c * pf( sum_t b_t B_t ) * prod_t b_t,   B_t = X W_t X^T,

where b is a uniform sign vector, W_t is the pair matrix of ket block t and X
is the row restriction of a single-particle kernel to the bra's occupied
modes.  The kernel is assembled per sample as

    G = left @ middle @ right,

with `left = G_L†` and `right = G_R` (fixed maps or auxiliary-field paths)
and the observable-specific `middle` (parity strings, phases, sources,
branch circuits).  Bras are either fixed Fock states or block-product states
sampled slot by slot with probability |v|^2 and importance weight 1/v.

All epsilon values are absolute additive errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from .errors import CapacityError, ValidationError
from .maps import GaussianMap, LatticeSpec, hirsch_lambda, compose
from .pfaffian import mixed_pfaffian_exact, pfaffian_batch
from .sampling import CHUNK_SIZE, check_seed, iter_chunks
from .states import ApsgState, FockState, slot_patterns, num_slot_patterns, ordered_sign

MAX_SAMPLES = 10 ** 9
BINNED_GUARD = 4096
EXACT_SIGN_GUARD = 20
TYPICAL_SCALE = math.sqrt(2 / math.pi)


# ---------------------------------------------------------------------------
# results and budgets


@dataclass(frozen=True)
class Estimate:
    value: complex
    std_error: float
    samples: int
    epsilon: float
    delta: float
    bound: float
    method: str
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def real(self) -> float:
        return self.value.real


def hoeffding_samples(bound: float, eps: float, delta: float, complex_valued: bool = False) -> int:
    """Samples for |mean - truth| <= eps with probability 1 - delta, one-shots bounded by `bound`.

    The real form is ceil(2 B^2 ln(2/delta) / eps^2).  The complex form
    splits eps by sqrt(2) and delta by 2 between real and imaginary parts.
    """
    _check_budget(eps, delta)
    if bound == 0:
        return 0
    if not math.isfinite(bound):
        return math.inf
    factor, log_arg = (4, 4) if complex_valued else (2, 2)
    log_k = 2 * math.log(bound) + math.log(factor * math.log(log_arg / delta)) - 2 * math.log(eps)
    if log_k > 700:
        return math.inf
    return math.ceil(factor * bound ** 2 * math.log(log_arg / delta) / eps ** 2)


def hoeffding_epsilon(bound: float, samples: int, delta: float,
                      complex_valued: bool = False) -> float:
    """Accuracy guaranteed by `samples` one-shots bounded by `bound` (inverse of the budget)."""
    factor, log_arg = (4, 4) if complex_valued else (2, 2)
    return bound * math.sqrt(factor * math.log(log_arg / delta) / samples)


def median_of_means_plan(moment: float, eps: float, delta: float,
                         complex_valued: bool = False) -> tuple[int, int]:
    """(groups, group size) from a second-moment bound via Chebyshev per group."""
    _check_budget(eps, delta)
    groups = math.ceil(8 * math.log(2 / delta))
    scale = 8 if complex_valued else 4
    return groups, max(1, math.ceil(scale * moment / eps ** 2))


def median_of_means(samples, groups: int) -> complex:
    """Coordinatewise median of group means; trailing samples that do not fill a group are dropped."""
    samples = np.asarray(samples, dtype=complex)
    if samples.size == 0:
        raise ValidationError("median_of_means needs at least one sample")
    if groups < 1:
        raise ValidationError(f"groups must be positive, got {groups}")
    groups = min(groups, samples.size)
    size = samples.size // groups
    means = samples[:groups * size].reshape(groups, size).mean(axis=1)
    return complex(np.median(means.real), np.median(means.imag))


def _check_budget(eps: float, delta: float) -> None:
    if not (0 < eps and 0 < delta < 1):
        raise ValidationError(f"need eps > 0 and 0 < delta < 1, got eps={eps}, delta={delta}")


# ---------------------------------------------------------------------------
# single-shot samplers


class OneShot:
    """A random variable with a known pointwise bound and second-moment bound."""

    bound: float = math.inf
    moment: float = math.inf

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError


class ZeroShot(OneShot):
    bound = 0.0
    moment = 0.0

    def draw(self, rng, n):
        return np.zeros(n, dtype=complex)


class ConstantShot(OneShot):
    def __init__(self, value: complex):
        self.value = complex(value)
        self.bound = abs(self.value)
        self.moment = self.bound ** 2

    def draw(self, rng, n):
        return np.full(n, self.value)


class Mixture(OneShot):
    """Unbiased one-shot for sum_i c_i E[Z_i] by importance sampling the index i."""

    def __init__(self, terms: Sequence[tuple[complex, OneShot]]):
        terms = [(complex(c), s) for c, s in terms if c != 0 and s.bound != 0]
        self.terms = terms
        if not terms:
            self.bound, self.moment, self.probs = 0.0, 0.0, np.zeros(0)
            return
        scale = np.array([abs(c) * (s.bound if math.isfinite(s.bound) else math.sqrt(s.moment))
                          for c, s in terms])
        self.probs = scale / scale.sum()
        self.bound = float(sum(abs(c) * s.bound for c, s in terms))
        self.moment = float(sum(abs(c) ** 2 * s.moment / p
                                for (c, s), p in zip(terms, self.probs)))

    def draw(self, rng, n):
        out = np.zeros(n, dtype=complex)
        if not self.terms:
            return out
        pick = rng.choice(len(self.terms), size=n, p=self.probs)
        for i, (c, shot) in enumerate(self.terms):
            idx = np.nonzero(pick == i)[0]
            if idx.size:
                out[idx] = (c / self.probs[i]) * shot.draw(rng, idx.size)
        return out


class ProductShot(OneShot):
    """Product of independent one-shots: unbiased for the product of means."""

    def __init__(self, *factors: OneShot):
        self.factors = factors
        self.bound = float(np.prod([f.bound for f in factors]))
        self.moment = float(np.prod([f.moment for f in factors]))

    def draw(self, rng, n):
        out = np.ones(n, dtype=complex)
        for f in self.factors:
            out *= f.draw(rng, n)
        return out


# --- bras ------------------------------------------------------------------


class FockBra:
    def __init__(self, state: FockState):
        self.state = state
        self.rows = np.array(state.occupied, dtype=np.intp)
        self.particle_number = state.particle_number
        self.weight_bound = 1.0
        self.num_modes = state.num_modes

    def sample(self, rng, n):
        return np.broadcast_to(self.rows, (n, self.rows.size)), None


class ApsgBra:
    """Bra <Phi| sampled slot-wise: rows in creation order, weight 1/v."""

    def __init__(self, phi: ApsgState):
        self.phi = phi
        self.particle_number = phi.particle_number
        self.num_modes = phi.num_modes
        self.blocks = []
        bound = 1.0
        for blk in phi.blocks:
            w = np.array(blk.weights)
            probs = np.abs(w) ** 2
            probs = probs / probs.sum()
            pairs = np.array([blk.slot(j) for j in range(blk.rank)], dtype=np.intp)
            self.blocks.append((pairs, w, probs))
            bound /= np.min(np.abs(w[probs > 0]))
        self.weight_bound = float(bound)

    def sample(self, rng, n):
        rows = np.empty((n, self.particle_number), dtype=np.intp)
        weight = np.ones(n, dtype=complex)
        for t, (pairs, w, probs) in enumerate(self.blocks):
            if len(w) == 1:
                choice = np.zeros(n, dtype=np.intp)
            else:
                choice = rng.choice(len(w), size=n, p=probs)
            rows[:, 2 * t:2 * t + 2] = pairs[choice]
            weight /= w[choice]
        return rows, weight


def make_bra(bra) -> FockBra | ApsgBra:
    if isinstance(bra, FockState):
        return FockBra(bra)
    if isinstance(bra, ApsgState):
        return ApsgBra(bra)
    if isinstance(bra, (FockBra, ApsgBra)):
        return bra
    raise ValidationError(f"unsupported bra type {type(bra).__name__}")


# --- map sources -------------------------------------------------------------


class FixedMap:
    def __init__(self, matrix: np.ndarray, norm: float):
        self.matrix = np.asarray(matrix, dtype=complex)
        self.norm = float(norm)

    def sample(self, rng, n):
        return self.matrix


class HsPathMap:
    """Random auxiliary-field propagator G(sigma), or its adjoint, per sample."""

    def __init__(self, lattice: LatticeSpec, interaction: float, dt: float, n_slices: int,
                 adjoint: bool = False, hopping: float | None = None):
        if n_slices < 1:
            raise ValidationError(f"need at least one time slice, got {n_slices}")
        if dt <= 0:
            raise ValidationError(f"time step must be positive, got {dt}")
        self.lattice = lattice
        self.n_slices = n_slices
        self.adjoint = adjoint
        self.lam = hirsch_lambda(interaction, dt)
        evals, evecs = np.linalg.eigh(lattice.hopping_matrix(hopping))
        self.half = (evecs * np.exp(-0.5j * dt * evals)[None, :]) @ evecs.conj().T
        self.norm = math.exp(abs(self.lam.real) * n_slices)

    def sample(self, rng, n):
        n_sites = self.lattice.num_sites
        sigma = rng.integers(0, 2, size=(n, self.n_slices, n_sites)) * 2 - 1
        g = np.broadcast_to(np.eye(self.lattice.num_modes, dtype=complex),
                            (n, self.lattice.num_modes, self.lattice.num_modes))
        for s in range(self.n_slices):
            field_diag = np.concatenate(
                [np.exp(-self.lam * sigma[:, s]), np.exp(self.lam * sigma[:, s])], axis=1)
            g = self.half @ (field_diag[:, :, None] * (self.half @ g))
        if self.adjoint:
            g = np.conj(np.swapaxes(g, 1, 2))
        return g


def as_map(g) -> GaussianMap:
    if isinstance(g, GaussianMap):
        return g
    return GaussianMap.from_matrix(g)


def fixed_left(g) -> FixedMap:
    g = as_map(g)
    return FixedMap(g.matrix.conj().T, g.op_norm)


def fixed_right(g) -> FixedMap:
    g = as_map(g)
    return FixedMap(g.matrix, g.op_norm)


# --- middles -------------------------------------------------------------------


class Middle:
    """Per-sample middle factor: returns (kind, array, coefficient array or None).

    kind is one of None, "diag" (array (n, M) or (M,)) or "full" ((n, M, M) or (M, M)).
    """

    norm: float = 1.0
    coef_bound: float = 1.0

    def sample(self, rng, n):
        return None, None, None


class FixedMiddle(Middle):
    def __init__(self, matrix, coef: complex = 1.0, diagonal: bool = False):
        arr = np.asarray(matrix, dtype=complex)
        self.kind = "diag" if diagonal else "full"
        self.array = arr
        self.coef = complex(coef)
        self.coef_bound = abs(self.coef)
        if diagonal:
            self.norm = float(np.max(np.abs(arr))) if arr.size else 1.0
        else:
            self.norm = float(np.linalg.norm(arr, 2)) if arr.size else 1.0

    def sample(self, rng, n):
        coef = None if self.coef == 1 else np.full(n, self.coef)
        return self.kind, self.array, coef


class ParityMiddle(Middle):
    """Uniform T within S, middle D_T, coefficient prod_{i in T} sign_i.

    Since n = (1 - (-1)^n) / 2, the product of projectors onto n_i = 1
    (sign -1) or n_i = 0 (sign +1) equals the uniform average over T of the
    signed parity strings.
    """

    def __init__(self, num_modes: int, modes: Sequence[int], signs: Sequence[int]):
        self.num_modes = num_modes
        self.modes = np.array(modes, dtype=np.intp)
        self.signs = np.array(signs, dtype=float)

    def sample(self, rng, n):
        if self.modes.size == 0:
            return None, None, None
        pick = rng.integers(0, 2, size=(n, self.modes.size))
        diag = np.ones((n, self.num_modes), dtype=complex)
        diag[:, self.modes] = 1 - 2 * pick
        coef = np.prod(np.where(pick == 1, self.signs[None, :], 1.0), axis=1)
        return "diag", diag, coef.astype(complex)


class ChargePhaseMiddle(Middle):
    """Random charge phases whose average is the doublon-free projector on each site."""

    def __init__(self, num_modes: int, site_modes: Sequence[tuple[int, int]]):
        self.num_modes = num_modes
        self.site_modes = np.array(site_modes, dtype=np.intp).reshape(-1, 2)
        self.coef_bound = (2 / math.sqrt(3)) ** len(self.site_modes)

    def sample(self, rng, n):
        k = len(self.site_modes)
        if k == 0:
            return None, None, None
        sigma = rng.integers(0, 2, size=(n, k)) * 2 - 1
        diag = np.ones((n, self.num_modes), dtype=complex)
        phase = np.exp(1j * sigma * math.pi / 3)
        diag[:, self.site_modes[:, 0]] = phase
        diag[:, self.site_modes[:, 1]] = phase
        coef = self.coef_bound * np.exp(-1j * math.pi / 6 * sigma.sum(axis=1))
        return "diag", diag, coef


class SourceMiddle(Middle):
    """Exact finite-difference sources for one-body operators and their products.

    For a rank-one R = u v†, the Fock action of I + f R is exactly
    1 + f c†Rc, so the symmetric difference of the two kernels isolates
    <c†Rc> with no truncation error.  A general one-body matrix is split by
    its singular value decomposition and the rank-one terms are importance
    sampled by singular value.  Products of two operators use the four-point
    mixed difference, which is likewise exact.
    """

    def __init__(self, factors: Sequence[np.ndarray], step: float):
        self.step = float(step)
        self.terms = []
        total = 1.0
        for x in factors:
            u, s, vh = np.linalg.svd(np.asarray(x, dtype=complex))
            keep = s > 1e-14 * max(1.0, s.max(initial=0.0))
            nuclear = float(s[keep].sum())
            self.terms.append((u[:, keep], s[keep], vh[keep], nuclear))
            total *= nuclear
        self.nuclear = total
        self.coef_bound = total / self.step ** len(factors) if self.terms else 1.0
        self.norm = (1 + self.step) ** len(factors)

    def sample(self, rng, n):
        if self.nuclear == 0:
            return None, None, np.zeros(n, dtype=complex)
        m = self.terms[0][0].shape[0]
        mid = np.broadcast_to(np.eye(m, dtype=complex), (n, m, m))
        coef = np.full(n, self.coef_bound, dtype=complex)
        for u, s, vh, nuclear in reversed(self.terms):
            k = rng.choice(s.size, size=n, p=s / nuclear)
            sign = rng.integers(0, 2, size=n) * 2 - 1
            rank_one = u[:, k].T[:, :, None] * vh[k][:, None, :]
            factor = np.eye(m)[None] + (sign * self.step)[:, None, None] * rank_one
            mid = factor @ mid
            coef = coef * sign
        return "full", mid, coef


class BranchCircuitMiddle(Middle):
    """Branch sampling for circuits of Gaussian layers and two-mode parity-phase gates."""

    def __init__(self, num_modes: int, circuit: Sequence):
        self.num_modes = num_modes
        self.circuit = []
        xi = 1.0
        for item in circuit:
            if isinstance(item, PhaseGate):
                c, s = math.cos(item.theta), math.sin(item.theta)
                xi *= (c + s) ** 2
                self.circuit.append(("gate", item, s / (c + s)))
            else:
                g = as_map(item)
                if not g.is_unitary:
                    raise ValidationError("circuit layers must be unitary passive maps")
                self.circuit.append(("map", g.matrix, None))
        self.sqrt_extent = math.sqrt(xi)
        self.coef_bound = self.sqrt_extent

    def sample(self, rng, n):
        m = self.num_modes
        g = np.broadcast_to(np.eye(m, dtype=complex), (n, m, m)).copy()
        flips = np.zeros(n, dtype=np.int64)
        for kind, item, p_flip in self.circuit:
            if kind == "map":
                g = item @ g
            else:
                x = rng.random(n) < p_flip
                flips += x
                sign = np.where(x, -1.0, 1.0)
                g[:, item.i, :] *= sign[:, None]
                g[:, item.j, :] *= sign[:, None]
        coef = self.sqrt_extent * (1j ** (flips % 4))
        return "full", g, coef


@dataclass(frozen=True)
class PhaseGate:
    """exp(i theta Z_i Z_j) = cos(theta) + i sin(theta) (-1)^{n_i + n_j}."""

    i: int
    j: int
    theta: float

    def __post_init__(self):
        if not (0.0 <= self.theta <= math.pi / 2):
            raise ValidationError(
                f"phase-gate angle must lie in [0, pi/2], got {self.theta}")
        if self.i == self.j:
            raise ValidationError("phase gate needs two distinct modes")


# --- the overlap kernel ------------------------------------------------------------


def evaluate_shots(rows: np.ndarray, bra_weight, left, middle, right,
                   psi: ApsgState, signs: np.ndarray) -> np.ndarray:
    """Pf-based one-shots for explicit rows, maps and sign vectors.

    rows: (n, 2N) bra modes in bra order; left/right: (M, M) or (n, M, M);
    middle: (kind, array) as produced by a Middle; signs: (n, N).
    """
    n = signs.shape[0]
    a_modes, b_modes, weights, owner = psi.slot_arrays()
    if psi.num_pairs == 0:
        out = np.ones(n, dtype=complex)
        return out if bra_weight is None else out * bra_weight
    if left.ndim == 2:
        lr = left[rows]
    else:
        lr = np.take_along_axis(left, rows[:, :, None], axis=1)
    kind, arr = middle
    if kind == "diag":
        lr = lr * (arr[:, None, :] if arr.ndim == 2 else arr[None, None, :])
    elif kind == "full":
        lr = lr @ arr
    if right.ndim == 2:
        xa = lr @ right[:, a_modes]
        xb = lr @ right[:, b_modes]
    else:
        xa = lr @ right[:, :, a_modes]
        xb = lr @ right[:, :, b_modes]
    coef = weights[None, :] * signs[:, owner]
    mats = (xa * coef[:, None, :]) @ np.swapaxes(xb, 1, 2)
    mats = mats - np.swapaxes(mats, 1, 2)
    out = pfaffian_batch(mats) * np.prod(signs, axis=1)
    if bra_weight is not None:
        out = out * bra_weight
    return out


class OverlapShot(OneShot):
    """One-shot for <bra| left · middle · right |psi>, times the middle's coefficient."""

    def __init__(self, bra, left, right, psi: ApsgState, middle: Middle | None = None):
        self.bra = make_bra(bra)
        self.left = left
        self.right = right
        self.psi = psi
        self.middle = middle or Middle()
        if self.bra.num_modes != psi.num_modes:
            raise ValidationError("bra and ket must share the mode count")
        self.mismatch = self.bra.particle_number != psi.particle_number
        n_pairs = psi.num_pairs
        kernel_norm = left.norm * self.middle.norm * right.norm
        if self.mismatch:
            self.bound = self.moment = 0.0
        else:
            self.bound = (self.middle.coef_bound * self.bra.weight_bound * psi.gamma
                          * kernel_norm ** (2 * n_pairs))
            if isinstance(self.bra, ApsgBra):
                self.moment = min(self.bound ** 2,
                                  self.middle.coef_bound ** 2 * kernel_norm ** (4 * n_pairs))
            else:
                self.moment = self.bound ** 2
        self.kernel_norm = kernel_norm

    def draw(self, rng, n):
        if self.mismatch:
            return np.zeros(n, dtype=complex)
        rows, weight = self.bra.sample(rng, n)
        signs = (rng.integers(0, 2, size=(n, self.psi.num_pairs)) * 2 - 1).astype(float)
        kind, arr, coef = self.middle.sample(rng, n)
        left = self.left.sample(rng, n)
        right = self.right.sample(rng, n)
        out = evaluate_shots(rows, weight, left, (kind, arr), right, self.psi, signs)
        return out if coef is None else out * coef


class TransitionKernel:
    """Fixed context <Phi| G_L† (.) G_R |Psi> from which observable one-shots are built."""

    def __init__(self, left, right, phi, psi: ApsgState):
        self.left = left if isinstance(left, (FixedMap, HsPathMap)) else fixed_left(left)
        self.right = right if isinstance(right, (FixedMap, HsPathMap)) else fixed_right(right)
        self.phi = phi
        self.psi = psi
        self.num_modes = psi.num_modes
        self.bra = make_bra(phi)

    @property
    def num_pairs(self) -> int:
        return self.psi.num_pairs

    def shot(self, middle: Middle | None = None) -> OverlapShot:
        return OverlapShot(self.bra, self.left, self.right, self.psi, middle)

    def overlap(self) -> OverlapShot:
        return self.shot()

    def parity_projector(self, modes: Sequence[int], occupied: Sequence[int]) -> OneShot:
        """prod_i P(n_i = occupied_i) via a uniform parity-string expansion."""
        modes = list(modes)
        _check_modes(modes, self.num_modes)
        signs = [-1 if a else 1 for a in occupied]
        if self.num_pairs == 0 and any(occupied):
            return ZeroShot()
        return self.shot(ParityMiddle(self.num_modes, modes, signs))

    def number_product(self, modes: Sequence[int]) -> OneShot:
        return self.parity_projector(modes, [1] * len(modes))

    def parity(self, modes: Sequence[int]) -> OneShot:
        _check_modes(modes, self.num_modes)
        d = np.ones(self.num_modes)
        d[list(modes)] = -1
        return self.shot(FixedMiddle(d, diagonal=True))

    def one_body(self, x: np.ndarray) -> OneShot:
        step = 1.0 / max(1, 2 * self.num_pairs - 1)
        return self.shot(SourceMiddle([x], step))

    def one_body_product(self, x: np.ndarray, y: np.ndarray) -> OneShot:
        """<(c†Xc)(c†Yc)>, X acting after Y."""
        step = 1.0 / max(1, 2 * self.num_pairs - 1)
        return self.shot(SourceMiddle([x, y], step))

    def wilson(self, site_modes: Sequence[tuple[int, int]]) -> OneShot:
        return self.shot(ChargePhaseMiddle(self.num_modes, site_modes))


def _check_modes(modes, num_modes):
    modes = list(modes)
    if len(set(modes)) != len(modes):
        raise ValidationError(f"repeated mode in {modes}")
    if any(not 0 <= m < num_modes for m in modes):
        raise ValidationError(f"modes {modes} outside [0, {num_modes})")


# ---------------------------------------------------------------------------
# aggregation driver


def run_shots(shot: OneShot, eps: float, delta: float, seed: int, *,
              real: bool = False, samples: int | None = None,
              aggregation: str = "auto", keys: Sequence[int] = (),
              bound_override: float | None = None, method: str = "",
              meta: dict | None = None, max_samples: int = MAX_SAMPLES) -> Estimate:
    """Aggregate i.i.d. one-shots into an Estimate with an (eps, delta) budget.

    `aggregation` is "mean" (Hoeffding budget from the pointwise bound),
    "mom" (median of means from the second-moment bound) or "auto" (whichever
    needs fewer samples).  `real` restricts the guarantee to the real part,
    as appropriate for Hermitian expectation values.  `bound_override`
    replaces the pointwise bound in the budget (used for heuristic
    envelopes); the rigorous bound is still recorded in the metadata.
    """
    _check_budget(eps, delta)
    seed = check_seed(seed)
    meta = dict(meta or {})
    bound = shot.bound if bound_override is None else float(bound_override)
    meta.setdefault("pointwise_bound", shot.bound)
    meta.setdefault("moment_bound", shot.moment)
    if shot.bound == 0:
        return Estimate(0j, 0.0, 0, eps, delta, 0.0, method + ":exact-zero", meta)
    complex_valued = not real
    k_mean = hoeffding_samples(bound, eps, delta, complex_valued) if math.isfinite(bound) else math.inf
    groups, size = median_of_means_plan(shot.moment, eps, delta, complex_valued) \
        if math.isfinite(shot.moment) else (0, math.inf)
    k_mom = groups * size
    if aggregation == "auto":
        aggregation = "mean" if k_mean <= k_mom or samples is not None else "mom"
    if aggregation not in ("mean", "mom"):
        raise ValidationError(f"unknown aggregation {aggregation!r}")
    if samples is not None:
        total = int(samples)
        if aggregation == "mom":
            groups = max(1, min(groups or 1, total))
            size = max(1, total // groups)
    elif aggregation == "mean":
        total = k_mean
    else:
        total = k_mom
    if not math.isfinite(total):
        raise CapacityError("no finite sample budget: the one-shot bounds are infinite")
    if total > max_samples:
        raise CapacityError(
            f"budget of {total} samples exceeds the limit {max_samples}; "
            f"loosen eps/delta or pass an explicit sample count", guard=max_samples)
    total = int(total)

    acc = 0j
    acc_sq = 0.0
    group_sums = np.zeros(groups if aggregation == "mom" else 0, dtype=complex)
    offset = 0
    for chunk in iter_chunks(shot.draw, total, seed, keys):
        acc += chunk.sum()
        acc_sq += float(np.sum(np.abs(chunk.real if real else chunk) ** 2))
        if aggregation == "mom":
            gid = (offset + np.arange(chunk.size)) // size
            ok = gid < groups
            group_sums += (np.bincount(gid[ok], weights=chunk.real[ok], minlength=groups)
                           + 1j * np.bincount(gid[ok], weights=chunk.imag[ok], minlength=groups))
        offset += chunk.size
    mean = acc / total
    centre = mean.real if real else mean
    var = max(acc_sq / total - abs(centre) ** 2, 0.0)
    std_error = math.sqrt(var * total / max(total - 1, 1)) / math.sqrt(total)
    if samples is not None:
        meta["requested_epsilon"] = eps
        if aggregation == "mom":
            eps = math.sqrt((8 if complex_valued else 4) * shot.moment / size)
        else:
            eps = hoeffding_epsilon(bound, total, delta, complex_valued)
    if aggregation == "mom":
        means = group_sums / size
        value = complex(np.median(means.real), 0.0 if real else np.median(means.imag))
        label = "median-of-means"
        meta["groups"] = groups
        meta["group_size"] = size
        report_bound = shot.moment ** 0.5
    else:
        value = complex(mean.real, 0.0) if real else complex(mean)
        label = "mean"
        report_bound = bound
    if real:
        meta["imag_mean"] = mean.imag
    meta["aggregation"] = label
    return Estimate(value, std_error, total, eps, delta, float(report_bound),
                    f"{method}:{label}" if method else label, meta)


# ---------------------------------------------------------------------------
# public estimators


def one_shot_fock(g, psi: ApsgState, x: FockState, signs: Sequence[int]) -> complex:
    """pf(sum_t b_t B_t(x)) prod_t b_t with each W_t rescaled to unit norm.

    Averaging over b and multiplying by gamma gives <x|G|psi>.
    """
    signs = np.asarray(signs)
    if signs.shape != (psi.num_pairs,):
        raise ValidationError(f"need {psi.num_pairs} signs, got shape {signs.shape}")
    if not np.all(np.isin(signs, (-1, 1))):
        raise ValidationError("sign entries must be +1 or -1")
    if x.particle_number != psi.particle_number:
        return 0j
    g = as_map(g)
    rows = np.array(x.occupied, dtype=np.intp)[None, :]
    out = evaluate_shots(rows, None, np.eye(psi.num_modes, dtype=complex), (None, None),
                         g.matrix, psi, signs[None, :].astype(float))
    return complex(out[0] / psi.gamma)


def fock_overlap_exact(g, psi: ApsgState, x: FockState) -> complex:
    """gamma times the exact average of one_shot_fock over all sign vectors."""
    if x.particle_number != psi.particle_number:
        return 0j
    n = psi.num_pairs
    if n > EXACT_SIGN_GUARD:
        raise CapacityError(f"{n} blocks exceeds the sign-enumeration guard {EXACT_SIGN_GUARD}",
                            guard=EXACT_SIGN_GUARD)
    g = as_map(g)
    signs = np.array(list(product((1.0, -1.0), repeat=n))).reshape(-1, n)
    rows = np.broadcast_to(np.array(x.occupied, dtype=np.intp), (len(signs), 2 * n))
    out = evaluate_shots(rows, None, np.eye(psi.num_modes, dtype=complex), (None, None),
                         g.matrix, psi, signs)
    return complex(out.mean())


def transition_blocks(g, rows: Sequence[int], psi: ApsgState) -> list[np.ndarray]:
    """B_t = X W_t X^T with X = G restricted to `rows` (in the given order)."""
    g = as_map(g).matrix
    x = g[list(rows), :]
    return [x @ blk.pair_matrix(psi.num_modes) @ x.T for blk in psi.blocks]


def apsg_overlap_exact(g, phi: ApsgState, psi: ApsgState) -> complex:
    """<Phi|G|Psi> summed over bra slot patterns with exact mixed Pfaffians."""
    if phi.particle_number != psi.particle_number:
        return 0j
    if num_slot_patterns(phi) > 1 << 16:
        raise CapacityError("too many bra slot patterns for exact summation", guard=1 << 16)
    total = 0j
    for _, weight, modes in slot_patterns(phi):
        total += np.conj(weight) * mixed_pfaffian_exact(transition_blocks(g, modes, psi))
    return complex(total)


def estimate_fock_overlap(g, psi: ApsgState, x: FockState, eps: float, delta: float,
                          seed: int, **opts) -> Estimate:
    """<x|G|Psi> to absolute error eps; pointwise bound gamma ||G||^{2N}."""
    g = as_map(g)
    shot = OverlapShot(FockBra(x), FixedMap(np.eye(g.num_modes), 1.0), fixed_right(g), psi)
    meta = {"gamma": psi.gamma, "op_norm_power": g.op_norm ** (2 * psi.num_pairs)}
    return run_shots(shot, eps, delta, seed, method="fock-overlap", meta=meta, **opts)


def estimate_apsg_overlap(g, phi: ApsgState, psi: ApsgState, eps: float, delta: float,
                          seed: int, **opts) -> Estimate:
    """<Phi|G|Psi> with bra slots importance sampled."""
    g = as_map(g)
    shot = OverlapShot(ApsgBra(phi), FixedMap(np.eye(g.num_modes), 1.0), fixed_right(g), psi)
    meta = {"gamma": psi.gamma, "op_norm_power": g.op_norm ** (2 * psi.num_pairs),
            "unitary": g.is_unitary}
    return run_shots(shot, eps, delta, seed, method="apsg-overlap", meta=meta, **opts)


def estimate_transition_correlator(g_left, g_right, phi, psi: ApsgState,
                                   modes: Sequence[int], eps: float, delta: float,
                                   seed: int, **opts) -> Estimate:
    """<Phi| G_L† (prod_{i in S} n_i) G_R |Psi> by parity-string sampling."""
    kernel = TransitionKernel(g_left, g_right, phi, psi)
    shot = kernel.number_product(modes)
    return run_shots(shot, eps, delta, seed, method="correlator",
                     meta={"modes": list(modes)}, **opts)


def estimate_marginal(u, psi: ApsgState, modes: Sequence[int], pattern: Sequence[int],
                      eps: float, delta: float, seed: int, **opts) -> Estimate:
    """Probability that the output modes S read the bit pattern a (unclamped)."""
    u = as_map(u)
    if not u.is_unitary:
        raise ValidationError("marginals are defined for unitary maps")
    if len(pattern) != len(modes) or any(a not in (0, 1) for a in pattern):
        raise ValidationError("pattern must be a 0/1 vector matching the mode subset")
    kernel = TransitionKernel(u, u, psi, psi)
    shot = kernel.parity_projector(modes, pattern)
    opts.setdefault("real", True)
    return run_shots(shot, eps, delta, seed, method="marginal",
                     meta={"modes": list(modes), "pattern": list(pattern)}, **opts)


@dataclass(frozen=True)
class BinnedDistribution:
    values: np.ndarray
    fourier: np.ndarray
    estimates: tuple[Estimate, ...]
    epsilon: float
    delta: float

    @property
    def samples(self) -> int:
        return sum(e.samples for e in self.estimates)


def characteristic_function(u, psi: ApsgState, weights: Sequence[int], k: int,
                            eps: float, delta: float, seed: int, **opts) -> Estimate:
    """<exp(i k theta Omega)> with theta = 2 pi / (Omega_max + 1)."""
    u = as_map(u)
    weights = np.asarray(weights, dtype=int)
    theta = 2 * math.pi / (int(weights.sum()) + 1)
    phases = np.exp(1j * k * theta * weights)
    kernel = TransitionKernel(u, u, psi, psi)
    shot = kernel.shot(FixedMiddle(phases, diagonal=True))
    return run_shots(shot, eps, delta, seed, method="characteristic",
                     meta={"k": k}, **opts)


def estimate_binned_distribution(u, psi: ApsgState, weights: Sequence[int], eps: float,
                                 delta: float, seed: int, **opts) -> BinnedDistribution:
    """Distribution of Omega = sum_i omega_i n_i over 0..Omega_max.

    Each Fourier coefficient is estimated to eps, which bounds every
    reconstructed bin error by eps; only k <= (Omega_max + 1) / 2 is sampled and the
    rest follows by conjugate symmetry.  The k = 0 coefficient is the state
    norm, exactly 1 for unitary maps.
    """
    u = as_map(u)
    weights = np.asarray(weights, dtype=int)
    if weights.shape != (psi.num_modes,) or np.any(weights < 0):
        raise ValidationError("bin weights must be nonnegative integers, one per mode")
    omega_max = int(weights.sum())
    if omega_max > BINNED_GUARD:
        raise CapacityError(f"Omega_max = {omega_max} exceeds the guard {BINNED_GUARD}",
                            guard=BINNED_GUARD)
    n_bins = omega_max + 1
    half = n_bins // 2
    fourier = np.zeros(n_bins, dtype=complex)
    estimates = []
    if u.is_unitary:
        fourier[0] = 1.0
    else:
        est = characteristic_function(u, psi, weights, 0, eps, delta / (half + 1), seed,
                                      keys=(0,), **opts)
        estimates.append(est)
        fourier[0] = est.value
    n_est = max(half, 1)
    for k in range(1, half + 1):
        est = characteristic_function(u, psi, weights, k, eps, delta / n_est, seed,
                                      keys=(k,), **opts)
        estimates.append(est)
        if 2 * k == n_bins:
            fourier[k] = est.value.real
        else:
            fourier[k] = est.value
            fourier[n_bins - k] = np.conj(est.value)
    values = np.real(np.fft.fft(fourier)) / n_bins
    return BinnedDistribution(values, fourier, tuple(estimates), eps, delta)


def binned_from_fourier(fourier: np.ndarray) -> np.ndarray:
    """Inverse transform G(Omega) = 1/(W+1) sum_k exp(-i k theta Omega) G~(k)."""
    fourier = np.asarray(fourier)
    return np.fft.fft(fourier) / fourier.size


def _rdm_operator_terms(num_modes: int, indices: Sequence[int]):
    def unit(p, q):
        e = np.zeros((num_modes, num_modes), dtype=complex)
        e[p, q] = 1.0
        return e

    if len(indices) == 2:
        p, q = indices
        return [(1.0, "one", unit(p, q), None)]
    if len(indices) == 4:
        p, q, r, s = indices
        terms = [(1.0, "two", unit(p, r), unit(q, s))]
        if r == q:
            terms.append((-1.0, "one", unit(p, s), None))
        return terms
    raise ValidationError(f"RDM indices must be (p,q) or (p,q,r,s), got {indices}")


def transition_rdm_element(g_left, g_right, phi, psi: ApsgState, indices: Sequence[int],
                           eps: float, delta: float, seed: int, **opts) -> Estimate:
    """<Phi| G_L† c†_p c_q G_R |Psi> or <... c†_p c†_q c_s c_r ...>.

    The two-body element uses c†_p c†_q c_s c_r = (c†_p c_r)(c†_q c_s) - delta_rq c†_p c_s.
    """
    kernel = TransitionKernel(g_left, g_right, phi, psi)
    _check_modes(sorted(set(indices)), kernel.num_modes)
    terms = []
    for coef, kind, x, y in _rdm_operator_terms(kernel.num_modes, indices):
        terms.append((coef, kernel.one_body(x) if kind == "one" else kernel.one_body_product(x, y)))
    shot = Mixture(terms)
    return run_shots(shot, eps, delta, seed, method="rdm",
                     meta={"indices": list(indices), "bias": 0.0,
                           "source_step": 1.0 / max(1, 2 * psi.num_pairs - 1)}, **opts)


def hamiltonian_shot(kernel: TransitionKernel, h1, factors, e0: float) -> Mixture:
    """E0 + c†h1c + 1/2 sum_l lambda_l (c†L_l c)^2 as one mixture one-shot."""
    terms: list[tuple[complex, OneShot]] = []
    if e0:
        terms.append((e0, kernel.overlap()))
    if h1 is not None and np.any(np.asarray(h1) != 0):
        terms.append((1.0, kernel.one_body(np.asarray(h1, dtype=complex))))
    for lam, mat in factors:
        if lam:
            mat = np.asarray(mat, dtype=complex)
            terms.append((0.5 * lam, kernel.one_body_product(mat, mat)))
    return Mixture(terms)


def hamiltonian_transition_element(g_left, g_right, phi, psi: ApsgState, h1,
                                   factors: Sequence[tuple[float, np.ndarray]], e0: float,
                                   eps: float, delta: float, seed: int, **opts) -> Estimate:
    """<Phi| G_L† H G_R |Psi> for H in sum-of-squares form."""
    kernel = TransitionKernel(g_left, g_right, phi, psi)
    shot = hamiltonian_shot(kernel, h1, factors, e0)
    return run_shots(shot, eps, delta, seed, method="hamiltonian",
                     meta={"factors": len(factors), "bias": 0.0}, **opts)


def orbital_gradient_shot(kernel: TransitionKernel, h1, factors, p: int, q: int) -> Mixture:
    """<[H, c†_p c_q - c†_q c_p]> expanded into one-body terms and ordered products."""
    m = kernel.num_modes
    kappa = np.zeros((m, m), dtype=complex)
    kappa[p, q] += 1.0
    kappa[q, p] -= 1.0
    terms: list[tuple[complex, OneShot]] = []
    if h1 is not None:
        h1 = np.asarray(h1, dtype=complex)
        comm = h1 @ kappa - kappa @ h1
        if np.any(comm != 0):
            terms.append((1.0, kernel.one_body(comm)))
    for lam, mat in factors:
        mat = np.asarray(mat, dtype=complex)
        comm = mat @ kappa - kappa @ mat
        if lam and np.any(comm != 0):
            terms.append((0.5 * lam, kernel.one_body_product(mat, comm)))
            terms.append((0.5 * lam, kernel.one_body_product(comm, mat)))
    return Mixture(terms)


def estimate_wilson_loop(u, psi: ApsgState, contour: Sequence[int], eps: float, delta: float,
                         seed: int, num_sites: int | None = None, **opts) -> Estimate:
    """<prod_{j in C} (1 - n_{j up} n_{j down})> via random charge phases."""
    kernel = TransitionKernel(u, u, psi, psi)
    shot = wilson_shot(kernel, contour, num_sites)
    opts.setdefault("real", True)
    return run_shots(shot, eps, delta, seed, method="wilson",
                     meta={"contour": list(contour)}, **opts)


def wilson_shot(kernel: TransitionKernel, contour: Sequence[int],
                num_sites: int | None = None) -> OneShot:
    contour = [int(j) for j in contour]
    if len(set(contour)) != len(contour):
        raise ValidationError(f"contour visits a site twice: {contour}")
    num_sites = kernel.num_modes // 2 if num_sites is None else num_sites
    if any(not 0 <= j < num_sites for j in contour):
        raise ValidationError(f"contour sites {contour} outside [0, {num_sites})")
    return kernel.wilson([(j, num_sites + j) for j in contour])


def charge_phase_factor(q: int) -> complex:
    """(2/sqrt 3) E_sigma[exp(-i sigma pi/6) exp(i sigma pi q / 3)]: 1, 1, 0 for q = 0, 1, 2."""
    total = sum(np.exp(-1j * s * math.pi / 6) * np.exp(1j * s * math.pi * q / 3) for s in (1, -1))
    return complex(2 / math.sqrt(3) * total / 2)


def wilson_loop_enumerated(u, psi: ApsgState, contour: Sequence[int],
                           num_sites: int | None = None) -> complex:
    """The charge-phase average evaluated exactly over all sigma with exact overlaps."""
    u = as_map(u)
    num_sites = psi.num_modes // 2 if num_sites is None else num_sites
    k = len(contour)
    total = 0j
    for sigma in product((1, -1), repeat=k):
        phases = np.ones(psi.num_modes, dtype=complex)
        for j, s in zip(contour, sigma):
            phases[j] = phases[num_sites + j] = np.exp(1j * s * math.pi / 3)
        kernel = u.matrix.conj().T @ (phases[:, None] * u.matrix)
        coef = (2 / math.sqrt(3)) ** k * np.exp(-1j * math.pi / 6 * sum(sigma))
        total += coef * apsg_overlap_exact(kernel, psi, psi)
    return complex(total / 2 ** k)


def hs_kernel(lattice: LatticeSpec, interaction: float, dt: float, n_slices: int,
              psi: ApsgState, hopping: float | None = None) -> TransitionKernel:
    """<Psi| G(sigma_L)† (.) G(sigma_R) |Psi> with independent auxiliary-field paths."""
    left = HsPathMap(lattice, interaction, dt, n_slices, adjoint=True, hopping=hopping)
    right = HsPathMap(lattice, interaction, dt, n_slices, adjoint=False, hopping=hopping)
    return TransitionKernel(left, right, psi, psi)


def _safe_exp(x: float) -> float:
    return math.exp(x) if x < 709 else math.inf


def hs_bounds(interaction: float, dt: float, n_slices: int, num_sites: int,
              num_pairs: int, c_t: float = 1.0) -> dict:
    """Worst-case, rigorous and typical one-shot envelopes for auxiliary-field kernels."""
    a = abs(hirsch_lambda(interaction, dt).real)
    t = n_slices * dt
    return {
        "a": a,
        "B_worst": c_t * _safe_exp(2 * a * n_slices * num_pairs),
        "B_rigorous": _safe_exp(4 * a * n_slices * num_pairs),
        "B_typ": _safe_exp(TYPICAL_SCALE * a * num_sites * math.sqrt(t / dt)),
    }


def estimate_hs_parity(lattice: LatticeSpec, interaction: float, dt: float, n_slices: int,
                       psi: ApsgState, modes: Sequence[int], eps: float, delta: float,
                       seed: int, envelope: str = "worst", hopping: float | None = None,
                       **opts) -> Estimate:
    """<Psi(t)| (-1)^{sum_{i in T} n_i} |Psi(t)> under Strang-split interacting evolution.

    envelope selects the one-shot scale used for the sample budget: "worst"
    (B_pt * C_T exp(2|a| n N), the default), "typical" (B_pt * B_typ, which
    can underestimate the actual spread) or "rigorous" (the pathwise
    operator-norm bound, valid for every sample).
    """
    kernel = hs_kernel(lattice, interaction, dt, n_slices, psi, hopping)
    shot = kernel.parity(modes)
    env = hs_bounds(interaction, dt, n_slices, lattice.num_sites, psi.num_pairs)
    base = kernel.bra.weight_bound * psi.gamma
    chosen = {"typical": base * env["B_typ"], "worst": base * env["B_worst"],
              "rigorous": shot.bound}
    if envelope not in chosen:
        raise ValidationError(f"envelope must be one of {sorted(chosen)}, got {envelope!r}")
    opts.setdefault("real", True)
    opts.setdefault("aggregation", "mean")
    meta = dict(env, envelope=envelope, modes=list(modes))
    return run_shots(shot, eps, delta, seed, method="hs-parity",
                     bound_override=chosen[envelope], meta=meta, **opts)


def estimate_extent_overlap(circuit: Sequence, phi: ApsgState, psi: ApsgState, eps: float,
                            delta: float, seed: int, **opts) -> Estimate:
    """<Phi| U |Psi> for a circuit of passive layers and exp(i theta Z_i Z_j) gates.

    The circuit list is applied in order (first element acts first).
    """
    middle = BranchCircuitMiddle(psi.num_modes, circuit)
    eye = FixedMap(np.eye(psi.num_modes), 1.0)
    shot = OverlapShot(ApsgBra(phi), eye, eye, psi, middle)
    return run_shots(shot, eps, delta, seed, method="extent",
                     meta={"extent": middle.sqrt_extent ** 2}, **opts)


__all__ = [
    "Estimate", "hoeffding_samples", "hoeffding_epsilon", "median_of_means", "median_of_means_plan",
    "OneShot", "Mixture", "ProductShot", "ConstantShot", "ZeroShot", "OverlapShot",
    "TransitionKernel", "PhaseGate", "run_shots", "one_shot_fock", "fock_overlap_exact",
    "apsg_overlap_exact", "transition_blocks", "estimate_fock_overlap",
    "estimate_apsg_overlap", "estimate_transition_correlator", "estimate_marginal",
    "BinnedDistribution", "characteristic_function", "estimate_binned_distribution",
    "binned_from_fourier", "transition_rdm_element", "hamiltonian_shot",
    "hamiltonian_transition_element", "orbital_gradient_shot", "estimate_wilson_loop",
    "wilson_shot", "charge_phase_factor", "wilson_loop_enumerated", "hs_kernel", "hs_bounds",
    "estimate_hs_parity", "estimate_extent_overlap", "compose", "ordered_sign",
    "CHUNK_SIZE",
]
