"""Config-driven experiment runner.

A config names one experiment kind, its inputs, an (eps, delta) budget and a
master seed.  Each output row gets its own seed derived from the master
seed and the row index, so rows are reproducible independently of thread
count and of each other.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time as wallclock
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError

from . import __version__, fock
from .errors import CapacityError, ValidationError
from .estimators import (Estimate, TransitionKernel, apsg_overlap_exact,
                         estimate_apsg_overlap, estimate_binned_distribution,
                         estimate_extent_overlap, estimate_fock_overlap, estimate_hs_parity,
                         estimate_marginal, estimate_transition_correlator,
                         hamiltonian_transition_element, orbital_gradient_shot, run_shots,
                         transition_rdm_element)
from .hubbard import (QuenchConfig, build_initial_state, doublon_number,
                      hs_complexity_envelope, oracle_czz_from_state, oracle_state,
                      particle_number, spin_correlator_czz, triplet_density, wilson_loop)
from .maps import LatticeSpec, compose, walker_propagator
from .sampling import derive_seed, thread_count
from .specs import build_circuit, build_factors, build_ket, build_map, build_state, complex_matrix
from .states import ApsgState, FockState, apsg_to_statevector

Kind = Literal["overlap", "correlator", "marginal", "binned", "rdm", "hamiltonian_element",
               "wilson", "quench_suite", "hs_parity", "extent", "envelope", "noci",
               "afqmc_overlap", "orbital_gradient"]

CSV_COLUMNS = ["observable", "params", "value_re", "value_im", "std_error", "samples",
               "bound", "epsilon", "delta", "method", "wall_time"]

Spec = dict[str, Any]


class Budget(BaseModel):
    model_config = ConfigDict(extra="forbid")
    eps: float = Field(0.05, gt=0)
    delta: float = Field(0.05, gt=0, lt=1)
    samples: Optional[int] = Field(None, ge=1)
    aggregation: Literal["auto", "mean", "mom"] = "auto"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Kind
    inputs: dict[str, Any] = Field(default_factory=dict)
    budget: Budget = Field(default_factory=Budget)
    seed: int = Field(0, ge=0, le=(1 << 64) - 1)
    output_path: Optional[str] = None
    name: Optional[str] = None


class _Inputs(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TransitionInputs(_Inputs):
    left: Spec
    right: Spec
    ket: Spec
    bra: Optional[Spec] = None


class OverlapInputs(_Inputs):
    map: Spec
    ket: Spec
    bra: Optional[Spec] = None


class CorrelatorInputs(TransitionInputs):
    modes: list[list[int]]


class MarginalInputs(_Inputs):
    map: Spec
    ket: Spec
    modes: list[int]
    patterns: list[list[int]]


class BinnedInputs(_Inputs):
    map: Spec
    ket: Spec
    weights: list[int]


class RdmInputs(TransitionInputs):
    indices: list[list[int]]


class HamiltonianInputs(TransitionInputs):
    h1: Optional[list] = None
    factors: list[Spec] = Field(default_factory=list)
    e0: float = 0.0


class OrbitalGradientInputs(HamiltonianInputs):
    pairs: list[list[int]]


class WilsonInputs(_Inputs):
    quench: Spec
    contours: list[list[int]]
    times: Optional[list[float]] = None


class QuenchSuiteInputs(_Inputs):
    quench: Spec
    observables: list[Literal["doublons", "czz", "triplets", "wilson", "particles"]] = \
        Field(default_factory=lambda: ["doublons", "czz", "triplets", "wilson"])
    czz_pairs: Optional[list[list[int]]] = None
    contours: list[list[int]] = Field(default_factory=list)


class HsParityInputs(_Inputs):
    quench: Spec
    parities: list[list[int]]
    envelope: Literal["worst", "typical", "rigorous"] = "worst"


class ExtentInputs(_Inputs):
    ket: Spec
    bra: Optional[Spec] = None
    circuit: list[Spec]


class EnvelopeInputs(_Inputs):
    W: list[float]
    t: list[float]
    trotter_k: Optional[int] = Field(None, ge=1)
    dt: Optional[float] = Field(None, gt=0)
    L: int = Field(ge=1)
    r: int = Field(ge=1)
    C_T: float = Field(1.0, gt=0)


class AfqmcInputs(_Inputs):
    lattice: Spec
    W: float
    dtau: float = Field(gt=0)
    slices: int = Field(ge=1)
    walkers: int = Field(ge=1)
    ket: Spec
    trial: Optional[Spec] = None


INPUT_MODELS: dict[str, type[_Inputs]] = {
    "overlap": OverlapInputs, "correlator": CorrelatorInputs, "marginal": MarginalInputs,
    "binned": BinnedInputs, "rdm": RdmInputs, "hamiltonian_element": HamiltonianInputs,
    "wilson": WilsonInputs, "quench_suite": QuenchSuiteInputs, "hs_parity": HsParityInputs,
    "extent": ExtentInputs, "envelope": EnvelopeInputs, "noci": HamiltonianInputs,
    "afqmc_overlap": AfqmcInputs, "orbital_gradient": OrbitalGradientInputs,
}


def _pydantic_message(exc: PydanticError, prefix: str) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in (prefix, *err["loc"]) if x != "")
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_config(source: str | Path | dict) -> ExperimentConfig:
    """Parse and schema-check a config (path, JSON text or dict)."""
    if isinstance(source, dict):
        data = source
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
    try:
        cfg = ExperimentConfig.model_validate(data)
    except PydanticError as exc:
        raise ValidationError(_pydantic_message(exc, "")) from exc
    parse_inputs(cfg)
    return cfg


def parse_inputs(cfg: ExperimentConfig) -> _Inputs:
    try:
        return INPUT_MODELS[cfg.kind].model_validate(cfg.inputs)
    except PydanticError as exc:
        raise ValidationError(_pydantic_message(exc, "inputs")) from exc


# ---------------------------------------------------------------------------
# results


@dataclass
class ResultRow:
    observable: str
    params: dict
    value: complex
    std_error: float = 0.0
    samples: int = 0
    bound: float = 0.0
    epsilon: float = 0.0
    delta: float = 0.0
    method: str = ""
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_estimate(cls, observable: str, params: dict, est: Estimate, wall: float) -> "ResultRow":
        return cls(observable, params, est.value, est.std_error, est.samples, est.bound,
                   est.epsilon, est.delta, est.method, wall, dict(est.meta))

    def csv_fields(self) -> list[str]:
        return [self.observable, json.dumps(_jsonable(self.params), sort_keys=True),
                repr(float(np.real(self.value))), repr(float(np.imag(self.value))),
                repr(float(self.std_error)), _count(self.samples), repr(float(self.bound)),
                repr(float(self.epsilon)), repr(float(self.delta)), self.method,
                f"{self.wall_time:.3f}"]


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[ResultRow]
    seed: int
    version: str = __version__
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(row.csv_fields())
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {"version": self.version, "seed": self.seed,
                "config": self.config.model_dump(mode="json"),
                "metadata": _jsonable(self.metadata),
                "rows": [{"observable": r.observable, "params": _jsonable(r.params),
                          "meta": _jsonable(r.meta)} for r in self.rows]}

    def write(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.config.name or self.config.kind
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _count(value) -> str:
    return str(int(value)) if math.isfinite(value) else "inf"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else repr(val)
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(np.real(obj)), float(np.imag(obj))]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# dispatch


class _Context:
    """Per-run helper that hands out row seeds and budget options."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.rows: list[ResultRow] = []
        self.metadata: dict = {}

    @property
    def eps(self) -> float:
        return self.cfg.budget.eps

    @property
    def delta(self) -> float:
        return self.cfg.budget.delta

    def opts(self) -> dict:
        out: dict = {}
        if self.cfg.budget.samples is not None:
            out["samples"] = self.cfg.budget.samples
        if self.cfg.budget.aggregation != "auto":
            out["aggregation"] = self.cfg.budget.aggregation
        return out

    def next_seed(self) -> int:
        return derive_seed(self.cfg.seed, len(self.rows))

    def add(self, observable: str, params: dict, fn: Callable[[int], Estimate]) -> Estimate:
        start = wallclock.perf_counter()
        est = fn(self.next_seed())
        self.rows.append(ResultRow.from_estimate(observable, params, est,
                                                 wallclock.perf_counter() - start))
        return est

    def add_value(self, observable: str, params: dict, value: complex, **kw) -> None:
        self.rows.append(ResultRow(observable, params, complex(value), **kw))


def _bra_and_ket(inp) -> tuple[ApsgState | FockState, ApsgState]:
    ket = build_ket(inp.ket, "inputs.ket")
    bra = ket if inp.bra is None else build_state(inp.bra, "inputs.bra")
    if bra.num_modes != ket.num_modes:
        raise ValidationError("inputs.bra and inputs.ket have different mode counts")
    return bra, ket


def _apsg_bra(inp) -> tuple[ApsgState, ApsgState]:
    bra, ket = _bra_and_ket(inp)
    if not isinstance(bra, ApsgState):
        raise ValidationError("inputs.bra must be a paired state for this kind")
    return bra, ket


def _check_size(g, ket: ApsgState, where: str) -> None:
    if g.num_modes != ket.num_modes:
        raise ValidationError(f"{where} acts on {g.num_modes} modes, ket has {ket.num_modes}")


def _transition(inp) -> tuple:
    bra, ket = _apsg_bra(inp)
    left = build_map(inp.left, "inputs.left")
    right = build_map(inp.right, "inputs.right")
    _check_size(left, ket, "inputs.left")
    _check_size(right, ket, "inputs.right")
    return left, right, bra, ket


def _quench(spec: Spec) -> QuenchConfig:
    try:
        return QuenchConfig.from_json(spec)
    except KeyError as exc:
        raise ValidationError(f"inputs.quench: missing field {exc}") from exc
    except ValidationError as exc:
        raise ValidationError(f"inputs.quench: {exc}") from exc


def _default_pairs(q: QuenchConfig) -> list[list[int]]:
    if q.dimers:
        return [list(q.dimers[0])]
    links = q.lattice.links
    return [[links[0].i, links[0].j]] if links else []


def run_experiment(cfg: ExperimentConfig | dict | str, threads: int | None = None) -> RunResult:
    """Run one experiment and return its rows (nothing is written to disk)."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    inp = parse_inputs(cfg)
    ctx = _Context(cfg)
    runner = _RUNNERS[cfg.kind]
    if threads is None:
        runner(ctx, inp)
    else:
        with thread_count(threads):
            runner(ctx, inp)
    return RunResult(cfg, ctx.rows, cfg.seed, metadata=ctx.metadata)


def _run_overlap(ctx: _Context, inp: OverlapInputs) -> None:
    bra, ket = _bra_and_ket(inp)
    g = build_map(inp.map, "inputs.map")
    _check_size(g, ket, "inputs.map")
    if isinstance(bra, FockState):
        ctx.add("overlap", {"bra": list(bra.occupied)},
                lambda s: estimate_fock_overlap(g, ket, bra, ctx.eps, ctx.delta, s, **ctx.opts()))
    else:
        ctx.add("overlap", {}, lambda s: estimate_apsg_overlap(g, bra, ket, ctx.eps, ctx.delta, s,
                                                               **ctx.opts()))
    ctx.metadata["gamma"] = ket.gamma
    ctx.metadata["op_norm_power"] = g.op_norm ** (2 * ket.num_pairs)


def _run_correlator(ctx: _Context, inp: CorrelatorInputs) -> None:
    left, right, bra, ket = _transition(inp)
    for modes in inp.modes:
        ctx.add("correlator", {"modes": modes},
                lambda s: estimate_transition_correlator(left, right, bra, ket, modes, ctx.eps,
                                                         ctx.delta, s, **ctx.opts()))


def _run_marginal(ctx: _Context, inp: MarginalInputs) -> None:
    ket = build_ket(inp.ket, "inputs.ket")
    u = build_map(inp.map, "inputs.map")
    _check_size(u, ket, "inputs.map")
    for pattern in inp.patterns:
        ctx.add("marginal", {"modes": inp.modes, "pattern": pattern},
                lambda s: estimate_marginal(u, ket, inp.modes, pattern, ctx.eps, ctx.delta, s,
                                            **ctx.opts()))


def _run_binned(ctx: _Context, inp: BinnedInputs) -> None:
    ket = build_ket(inp.ket, "inputs.ket")
    u = build_map(inp.map, "inputs.map")
    _check_size(u, ket, "inputs.map")
    start = wallclock.perf_counter()
    dist = estimate_binned_distribution(u, ket, inp.weights, ctx.eps, ctx.delta, ctx.next_seed(),
                                        **ctx.opts())
    wall = wallclock.perf_counter() - start
    bound = max((e.bound for e in dist.estimates), default=0.0)
    for omega, value in enumerate(dist.values):
        ctx.add_value("binned", {"omega": omega}, value, samples=dist.samples, bound=bound,
                      epsilon=ctx.eps, delta=ctx.delta, method="binned:inverse-dft",
                      wall_time=wall)


def _run_rdm(ctx: _Context, inp: RdmInputs) -> None:
    left, right, bra, ket = _transition(inp)
    for idx in inp.indices:
        name = "rdm1" if len(idx) == 2 else "rdm2"
        ctx.add(name, {"indices": idx},
                lambda s: transition_rdm_element(left, right, bra, ket, idx, ctx.eps, ctx.delta,
                                                 s, **ctx.opts()))


def _hamiltonian_parts(inp: HamiltonianInputs, num_modes: int):
    h1 = None if inp.h1 is None else complex_matrix(inp.h1, "inputs.h1")
    if h1 is not None and h1.shape != (num_modes, num_modes):
        raise ValidationError(f"inputs.h1 must be {num_modes}x{num_modes}")
    factors = build_factors(inp.factors, "inputs.factors")
    for i, (_, mat) in enumerate(factors):
        if mat.shape != (num_modes, num_modes):
            raise ValidationError(f"inputs.factors[{i}].matrix must be {num_modes}x{num_modes}")
    return h1, factors


def _run_hamiltonian(ctx: _Context, inp: HamiltonianInputs) -> None:
    left, right, bra, ket = _transition(inp)
    h1, factors = _hamiltonian_parts(inp, ket.num_modes)
    ctx.add("hamiltonian", {},
            lambda s: hamiltonian_transition_element(left, right, bra, ket, h1, factors, inp.e0,
                                                     ctx.eps, ctx.delta, s, **ctx.opts()))


def _run_noci(ctx: _Context, inp: HamiltonianInputs) -> None:
    left, right, bra, ket = _transition(inp)
    h1, factors = _hamiltonian_parts(inp, ket.num_modes)
    kernel = compose(left.adjoint(), right)
    ctx.add("S_LR", {}, lambda s: estimate_apsg_overlap(kernel, bra, ket, ctx.eps, ctx.delta, s,
                                                        **ctx.opts()))
    ctx.add("H_LR", {}, lambda s: hamiltonian_transition_element(
        left, right, bra, ket, h1, factors, inp.e0, ctx.eps, ctx.delta, s, **ctx.opts()))


def _run_orbital_gradient(ctx: _Context, inp: OrbitalGradientInputs) -> None:
    left, right, bra, ket = _transition(inp)
    h1, factors = _hamiltonian_parts(inp, ket.num_modes)
    kernel = TransitionKernel(left, right, bra, ket)
    for pair in inp.pairs:
        if len(pair) != 2:
            raise ValidationError(f"inputs.pairs entries must be [p, q], got {pair}")
        p, q = pair
        shot = orbital_gradient_shot(kernel, h1, factors, p, q)
        ctx.add("orbital_gradient", {"pair": pair},
                lambda s: run_shots(shot, ctx.eps, ctx.delta, s, method="orbital-gradient",
                                    **ctx.opts()))


def _run_wilson(ctx: _Context, inp: WilsonInputs) -> None:
    q = _quench(inp.quench)
    times = q.times if inp.times is None else inp.times
    for t in times:
        for contour in inp.contours:
            ctx.add("wilson", {"time": t, "contour": contour, "perimeter": len(contour)},
                    lambda s: wilson_loop(q, contour, t, ctx.eps, ctx.delta, s, **ctx.opts()))


def _run_quench_suite(ctx: _Context, inp: QuenchSuiteInputs) -> None:
    q = _quench(inp.quench)
    pairs = _default_pairs(q) if inp.czz_pairs is None else inp.czz_pairs
    ctx.metadata["initial_state"] = build_initial_state(q).meta
    for t in q.times:
        for obs in inp.observables:
            if obs == "doublons":
                ctx.add("doublons", {"time": t},
                        lambda s: doublon_number(q, t, ctx.eps, ctx.delta, s, **ctx.opts()))
            elif obs == "particles":
                ctx.add("particles", {"time": t},
                        lambda s: particle_number(q, t, ctx.eps, ctx.delta, s, **ctx.opts()))
            elif obs == "triplets":
                ctx.add("triplets", {"time": t},
                        lambda s: triplet_density(q, t, ctx.eps, ctx.delta, s, **ctx.opts()))
            elif obs == "czz":
                for i, j in pairs:
                    ctx.add("czz", {"time": t, "sites": [i, j]},
                            lambda s: spin_correlator_czz(q, i, j, t, ctx.eps, ctx.delta, s,
                                                          **ctx.opts()))
            elif obs == "wilson":
                for contour in inp.contours:
                    ctx.add("wilson", {"time": t, "contour": contour, "perimeter": len(contour)},
                            lambda s: wilson_loop(q, contour, t, ctx.eps, ctx.delta, s,
                                                  **ctx.opts()))


def _run_hs_parity(ctx: _Context, inp: HsParityInputs) -> None:
    q = _quench(inp.quench)
    psi = build_initial_state(q)
    for t in q.times:
        if t <= 0:
            raise ValidationError("inputs.quench.times must be positive for hs_parity")
        dt = t / q.trotter_steps
        for modes in inp.parities:
            ctx.add("hs_parity", {"time": t, "modes": modes, "dt": dt},
                    lambda s: estimate_hs_parity(q.lattice, q.interaction, dt, q.trotter_steps,
                                                 psi, modes, ctx.eps, ctx.delta, s,
                                                 envelope=inp.envelope, **ctx.opts()))


def _run_extent(ctx: _Context, inp: ExtentInputs) -> None:
    bra, ket = _apsg_bra(inp)
    circuit = build_circuit(inp.circuit, "inputs.circuit")
    ctx.add("extent_overlap", {},
            lambda s: estimate_extent_overlap(circuit, bra, ket, ctx.eps, ctx.delta, s,
                                              **ctx.opts()))


def _envelope_dt(inp: EnvelopeInputs, t: float) -> float:
    if inp.dt is not None:
        return inp.dt
    if inp.trotter_k is None:
        raise ValidationError("inputs: envelope needs either dt or trotter_k")
    return t / inp.trotter_k


def _run_envelope(ctx: _Context, inp: EnvelopeInputs) -> None:
    for w in inp.W:
        for t in inp.t:
            dt = _envelope_dt(inp, t)
            if dt <= 0:
                raise ValidationError(f"inputs: time step must be positive (t={t})")
            env = hs_complexity_envelope(w, t, dt, inp.L, inp.r, inp.C_T, ctx.eps, ctx.delta)
            params = {"W": w, "t": t, "dt": dt, "a": env.a}
            ctx.add_value("envelope_worst", params, env.B_worst, samples=env.K_worst,
                          bound=env.B_worst, epsilon=ctx.eps, delta=ctx.delta,
                          method="envelope:worst")
            ctx.add_value("envelope_typ", params, env.B_typ, samples=env.K_typ,
                          bound=env.B_typ, epsilon=ctx.eps, delta=ctx.delta,
                          method="envelope:typical")


def walker_paths(inp: AfqmcInputs, lattice: LatticeSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, 0xAF))
    return rng.integers(0, 2, size=(inp.walkers, inp.slices, lattice.num_sites)) * 2 - 1


def _run_afqmc(ctx: _Context, inp: AfqmcInputs) -> None:
    lattice = LatticeSpec.from_json(inp.lattice)
    ket = build_ket(inp.ket, "inputs.ket")
    trial = ket if inp.trial is None else build_ket(inp.trial, "inputs.trial")
    if ket.num_modes != lattice.num_modes:
        raise ValidationError("inputs.ket must live on the lattice's 2L modes")
    for w, path in enumerate(walker_paths(inp, lattice, ctx.cfg.seed)):
        g = walker_propagator(lattice, inp.W, inp.dtau, path)
        ctx.add("walker_overlap", {"walker": w, "op_norm": g.op_norm},
                lambda s: estimate_apsg_overlap(g, trial, ket, ctx.eps, ctx.delta, s,
                                                **ctx.opts()))


_RUNNERS: dict[str, Callable] = {
    "overlap": _run_overlap, "correlator": _run_correlator, "marginal": _run_marginal,
    "binned": _run_binned, "rdm": _run_rdm, "hamiltonian_element": _run_hamiltonian,
    "wilson": _run_wilson, "quench_suite": _run_quench_suite, "hs_parity": _run_hs_parity,
    "extent": _run_extent, "envelope": _run_envelope, "noci": _run_noci,
    "afqmc_overlap": _run_afqmc, "orbital_gradient": _run_orbital_gradient,
}


# ---------------------------------------------------------------------------
# brute-force oracle path


def run_oracle(cfg: ExperimentConfig | dict | str) -> RunResult:
    """Exact values for the same rows via dense statevectors (small systems only)."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    inp = parse_inputs(cfg)
    ctx = _Context(cfg)
    _ORACLES[cfg.kind](ctx, inp)
    for row in ctx.rows:
        row.method = row.method or "oracle"
    return RunResult(cfg, ctx.rows, cfg.seed, metadata=ctx.metadata)


def _vec(state) -> np.ndarray:
    if isinstance(state, FockState):
        v = np.zeros(1 << state.num_modes, dtype=complex)
        v[state.index] = 1.0
        return v
    return apsg_to_statevector(state)


def _oracle_transition(op, left, right, bra, ket) -> complex:
    fock._check_guard(ket.num_modes)
    lv = fock.apply_map(left, _vec(bra))
    rv = fock.apply_map(right, _vec(ket))
    return complex(np.vdot(lv, op(rv)))


def _hamiltonian_operator(h1, factors, e0):
    terms = [(e0, fock.identity_operator())]
    if h1 is not None:
        terms.append((1.0, fock.one_body(h1)))
    for lam, mat in factors:
        o = fock.one_body(mat)
        terms.append((0.5 * lam, fock.product_operator(o, o)))
    return fock.sum_operator(terms)


def _o_overlap(ctx, inp):
    bra, ket = _bra_and_ket(inp)
    g = build_map(inp.map, "inputs.map")
    params = {"bra": list(bra.occupied)} if isinstance(bra, FockState) else {}
    eye = np.eye(ket.num_modes)
    ctx.add_value("overlap", params, _oracle_transition(fock.identity_operator(), eye, g, bra, ket))


def _o_correlator(ctx, inp):
    left, right, bra, ket = _transition(inp)
    for modes in inp.modes:
        ctx.add_value("correlator", {"modes": modes},
                      _oracle_transition(fock.number_product(modes), left, right, bra, ket))


def _o_marginal(ctx, inp):
    ket = build_ket(inp.ket, "inputs.ket")
    u = build_map(inp.map, "inputs.map")
    probs = np.abs(fock.apply_map(u, _vec(ket))) ** 2
    occ = fock.occupations(ket.num_modes)
    for pattern in inp.patterns:
        mask = np.all(occ[:, inp.modes] == np.array(pattern, dtype=np.int8), axis=1) \
            if inp.modes else np.ones(len(probs), dtype=bool)
        ctx.add_value("marginal", {"modes": inp.modes, "pattern": pattern}, probs[mask].sum())


def _o_binned(ctx, inp):
    ket = build_ket(inp.ket, "inputs.ket")
    u = build_map(inp.map, "inputs.map")
    probs = np.abs(fock.apply_map(u, _vec(ket))) ** 2
    omega = fock.occupations(ket.num_modes) @ np.asarray(inp.weights)
    hist = np.bincount(omega, weights=probs, minlength=int(np.sum(inp.weights)) + 1)
    for o, value in enumerate(hist):
        ctx.add_value("binned", {"omega": o}, value)


def _o_rdm(ctx, inp):
    left, right, bra, ket = _transition(inp)
    for idx in inp.indices:
        if len(idx) == 2:
            x = np.zeros((ket.num_modes, ket.num_modes))
            x[idx[0], idx[1]] = 1
            op, name = fock.one_body(x), "rdm1"
        elif len(idx) == 4:
            op, name = fock.two_body(*idx), "rdm2"
        else:
            raise ValidationError(f"RDM indices must be (p,q) or (p,q,r,s), got {idx}")
        ctx.add_value(name, {"indices": idx}, _oracle_transition(op, left, right, bra, ket))


def _o_hamiltonian(ctx, inp):
    left, right, bra, ket = _transition(inp)
    h1, factors = _hamiltonian_parts(inp, ket.num_modes)
    ctx.add_value("hamiltonian", {}, _oracle_transition(
        _hamiltonian_operator(h1, factors, inp.e0), left, right, bra, ket))


def _o_noci(ctx, inp):
    left, right, bra, ket = _transition(inp)
    h1, factors = _hamiltonian_parts(inp, ket.num_modes)
    ctx.add_value("S_LR", {}, _oracle_transition(fock.identity_operator(), left, right, bra, ket))
    ctx.add_value("H_LR", {}, _oracle_transition(
        _hamiltonian_operator(h1, factors, inp.e0), left, right, bra, ket))


def _o_orbital_gradient(ctx, inp):
    left, right, bra, ket = _transition(inp)
    h1, factors = _hamiltonian_parts(inp, ket.num_modes)
    ham = _hamiltonian_operator(h1, factors, 0.0)
    for p, q in inp.pairs:
        kappa = np.zeros((ket.num_modes, ket.num_modes))
        kappa[p, q] += 1
        kappa[q, p] -= 1
        k_op = fock.one_body(kappa)
        comm = fock.sum_operator([(1.0, fock.product_operator(ham, k_op)),
                                  (-1.0, fock.product_operator(k_op, ham))])
        ctx.add_value("orbital_gradient", {"pair": [p, q]},
                      _oracle_transition(comm, left, right, bra, ket))


def _o_wilson(ctx, inp):
    q = _quench(inp.quench)
    times = q.times if inp.times is None else inp.times
    for t in times:
        vec = oracle_state(q, t)
        for contour in inp.contours:
            val = np.vdot(vec, fock.wilson_loop(contour, q.lattice.num_sites)(vec))
            ctx.add_value("wilson", {"time": t, "contour": contour, "perimeter": len(contour)},
                          val.real)


def _o_quench_suite(ctx, inp):
    q = _quench(inp.quench)
    lat = q.lattice
    pairs = _default_pairs(q) if inp.czz_pairs is None else inp.czz_pairs
    for t in q.times:
        vec = oracle_state(q, t)

        def expect(op):
            return float(np.real(np.vdot(vec, op(vec))))

        for obs in inp.observables:
            if obs == "doublons":
                val = sum(expect(fock.number_product(lat.site_modes(i)))
                          for i in range(lat.num_sites))
                ctx.add_value("doublons", {"time": t}, val)
            elif obs == "particles":
                val = sum(expect(fock.number_product([m])) for m in range(lat.num_modes))
                ctx.add_value("particles", {"time": t}, val)
            elif obs == "triplets":
                val = sum(oracle_czz_from_state(q, vec, l.i, l.j) for l in lat.links)
                ctx.add_value("triplets", {"time": t}, 2.0 / lat.num_sites * val)
            elif obs == "czz":
                for i, j in pairs:
                    ctx.add_value("czz", {"time": t, "sites": [i, j]},
                                  oracle_czz_from_state(q, vec, i, j))
            elif obs == "wilson":
                for contour in inp.contours:
                    ctx.add_value("wilson",
                                  {"time": t, "contour": contour, "perimeter": len(contour)},
                                  expect(fock.wilson_loop(contour, lat.num_sites)))


def _o_hs_parity(ctx, inp):
    q = _quench(inp.quench)
    for t in q.times:
        vec = oracle_state(q, t)
        dt = t / q.trotter_steps
        for modes in inp.parities:
            val = np.vdot(vec, fock.parity_string(modes)(vec)).real
            ctx.add_value("hs_parity", {"time": t, "modes": modes, "dt": dt}, val)


def _o_extent(ctx, inp):
    bra, ket = _apsg_bra(inp)
    vec = _vec(ket)
    for item in build_circuit(inp.circuit, "inputs.circuit"):
        if hasattr(item, "theta"):
            zz = fock.parity_string([item.i, item.j])(np.ones_like(vec))
            vec = np.exp(1j * item.theta * zz) * vec
        else:
            vec = fock.apply_map(item, vec)
    ctx.add_value("extent_overlap", {}, np.vdot(_vec(bra), vec))


def _o_afqmc(ctx, inp):
    lattice = LatticeSpec.from_json(inp.lattice)
    ket = build_ket(inp.ket, "inputs.ket")
    trial = ket if inp.trial is None else build_ket(inp.trial, "inputs.trial")
    for w, path in enumerate(walker_paths(inp, lattice, ctx.cfg.seed)):
        g = walker_propagator(lattice, inp.W, inp.dtau, path)
        ctx.add_value("walker_overlap", {"walker": w, "op_norm": g.op_norm},
                      np.vdot(_vec(trial), fock.apply_map(g, _vec(ket))))


_ORACLES: dict[str, Callable] = {
    "overlap": _o_overlap, "correlator": _o_correlator, "marginal": _o_marginal,
    "binned": _o_binned, "rdm": _o_rdm, "hamiltonian_element": _o_hamiltonian,
    "wilson": _o_wilson, "quench_suite": _o_quench_suite, "hs_parity": _o_hs_parity,
    "extent": _o_extent, "envelope": _run_envelope, "noci": _o_noci,
    "afqmc_overlap": _o_afqmc, "orbital_gradient": _o_orbital_gradient,
}


# ---------------------------------------------------------------------------
# plot data


class PlotSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    x: str
    y: str = "value_re"
    yerr: Optional[str] = "std_error"
    series_by: str = "observable"
    series: Optional[list[str]] = None


def read_result_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _field(row: dict, name: str):
    if name in row:
        return row[name]
    params = json.loads(row.get("params") or "{}")
    if name in params:
        val = params[name]
        return json.dumps(val, sort_keys=True) if isinstance(val, (list, dict)) else val
    raise ValidationError(f"column or parameter {name!r} not found in result row")


def emit_plot_data(rows: list[dict] | RunResult, spec: PlotSpec | dict) -> str:
    """Tidy (x, y, yerr, series) CSV text, ordered by series then x."""
    if isinstance(rows, RunResult):
        rows = list(csv.DictReader(io.StringIO(rows.to_csv())))
    if not isinstance(spec, PlotSpec):
        try:
            spec = PlotSpec.model_validate(spec)
        except PydanticError as exc:
            raise ValidationError(_pydantic_message(exc, "plotspec")) from exc
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "yerr", "series"])
    if not rows:
        return buf.getvalue()
    tidy = []
    for order, row in enumerate(rows):
        series = str(_field(row, spec.series_by))
        x = _field(row, spec.x)
        y = _field(row, spec.y)
        yerr = _field(row, spec.yerr) if spec.yerr else ""
        tidy.append((series, x, y, yerr, order))
    available = sorted({t[0] for t in tidy})
    if spec.series is not None:
        missing = [s for s in spec.series if s not in available]
        if missing:
            raise ValidationError(
                f"series {missing} not present; available series: {available}")
        keep = set(spec.series)
        tidy = [t for t in tidy if t[0] in keep]

    def sort_key(t):
        try:
            xv = (0, float(t[1]), "")
        except (TypeError, ValueError):
            xv = (1, 0.0, str(t[1]))
        return (t[0], xv, t[4])

    for series, x, y, yerr, _ in sorted(tidy, key=sort_key):
        writer.writerow([x, y, yerr, series])
    return buf.getvalue()


__all__ = [
    "ExperimentConfig", "Budget", "RunResult", "ResultRow", "PlotSpec", "load_config",
    "run_experiment", "run_oracle", "emit_plot_data", "read_result_csv", "CSV_COLUMNS",
    "CapacityError",
]
