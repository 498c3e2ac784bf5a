"""JSON builders for states, maps and circuits used by experiment configs.

State specs:
    {"psi4": N}
    {"num_modes": M, "blocks": [{"modes": [...], "weights": [[re, im], ...]}]}
    {"random": {"num_modes": M, "ranks": [r1, ...], "seed": s}}
    {"quench": <quench config>}          (initial triplet-dimer state)
    {"fock": [occupied modes], "num_modes": M}   (bras only)

Map specs:
    {"identity": M}
    {"matrix": [[[re, im], ...], ...]}
    {"random_unitary": {"num_modes": M, "seed": s}}
    {"random_matrix": {"num_modes": M, "seed": s, "scale": c}}
    {"hopping": {"lattice": {...}, "time": t}}
    {"phases": [theta_1, ...]}
    {"parity": {"num_modes": M, "modes": [...]}}
    {"compose": [spec_left, ..., spec_right]}   (rightmost acts first)
    {"adjoint": spec}
"""

from __future__ import annotations

from typing import Any

import numpy as np

from .errors import ValidationError
from .estimators import PhaseGate
from .hubbard import QuenchConfig, build_initial_state
from .maps import (GaussianMap, LatticeSpec, compose, diagonal_phase, hopping_evolution,
                   parity_map, random_unitary)
from .states import ApsgState, FockState, psi4_product, random_apsg


def _need(spec: Any, where: str) -> dict:
    if not isinstance(spec, dict) or len(spec) == 0:
        raise ValidationError(f"{where}: expected a JSON object, got {spec!r}")
    return spec


def complex_matrix(data, where: str) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 3 and arr.shape[-1] == 2:
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.ndim == 2:
        return arr.astype(complex)
    raise ValidationError(f"{where}: matrix must be nested [re, im] pairs or real rows")


def build_state(spec: Any, where: str = "state") -> ApsgState | FockState:
    spec = _need(spec, where)
    try:
        if "psi4" in spec:
            return psi4_product(int(spec["psi4"]))
        if "blocks" in spec:
            return ApsgState.from_json(spec)
        if "random" in spec:
            r = spec["random"]
            rng = np.random.default_rng(int(r.get("seed", 0)))
            return random_apsg(rng, int(r["num_modes"]), [int(x) for x in r["ranks"]])
        if "quench" in spec:
            return build_initial_state(QuenchConfig.from_json(spec["quench"]))
        if "fock" in spec:
            return FockState(int(spec["num_modes"]), tuple(int(i) for i in spec["fock"]))
    except KeyError as exc:
        raise ValidationError(f"{where}: missing field {exc}") from exc
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    raise ValidationError(f"{where}: unknown state spec with keys {sorted(spec)}")


def build_ket(spec: Any, where: str = "ket") -> ApsgState:
    state = build_state(spec, where)
    if not isinstance(state, ApsgState):
        raise ValidationError(f"{where}: a paired (APSG) state is required")
    return state


def build_map(spec: Any, where: str = "map") -> GaussianMap:
    spec = _need(spec, where)
    try:
        if "identity" in spec:
            return GaussianMap.identity(int(spec["identity"]))
        if "matrix" in spec:
            return GaussianMap.from_matrix(complex_matrix(spec["matrix"], where))
        if "random_unitary" in spec:
            r = spec["random_unitary"]
            return random_unitary(np.random.default_rng(int(r.get("seed", 0))), int(r["num_modes"]))
        if "random_matrix" in spec:
            r = spec["random_matrix"]
            rng = np.random.default_rng(int(r.get("seed", 0)))
            m = int(r["num_modes"])
            scale = float(r.get("scale", 1.0 / np.sqrt(m)))
            mat = scale * (rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))) / np.sqrt(2)
            return GaussianMap(mat, False)
        if "hopping" in spec:
            h = spec["hopping"]
            return hopping_evolution(LatticeSpec.from_json(h["lattice"]), float(h["time"]))
        if "phases" in spec:
            return diagonal_phase([float(x) for x in spec["phases"]])
        if "parity" in spec:
            p = spec["parity"]
            return parity_map(int(p["num_modes"]), [int(i) for i in p["modes"]])
        if "compose" in spec:
            parts = [build_map(s, f"{where}.compose[{i}]") for i, s in enumerate(spec["compose"])]
            if not parts:
                raise ValidationError("compose needs at least one map")
            out = parts[-1]
            for g in reversed(parts[:-1]):
                out = compose(g, out)
            return out
        if "adjoint" in spec:
            return build_map(spec["adjoint"], f"{where}.adjoint").adjoint()
    except KeyError as exc:
        raise ValidationError(f"{where}: missing field {exc}") from exc
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    raise ValidationError(f"{where}: unknown map spec with keys {sorted(spec)}")


def build_circuit(items: list, where: str = "circuit") -> list:
    out = []
    for i, item in enumerate(items):
        item = _need(item, f"{where}[{i}]")
        if "gate" in item:
            g = item["gate"]
            if len(g) != 3:
                raise ValidationError(f"{where}[{i}]: gate must be [i, j, theta]")
            try:
                out.append(PhaseGate(int(g[0]), int(g[1]), float(g[2])))
            except ValidationError as exc:
                raise ValidationError(f"{where}[{i}]: {exc}") from exc
        else:
            out.append(build_map(item.get("map", item), f"{where}[{i}]"))
    return out


def build_factors(items: list, where: str = "factors") -> list[tuple[float, np.ndarray]]:
    out = []
    for i, f in enumerate(items):
        f = _need(f, f"{where}[{i}]")
        if "lambda" not in f or "matrix" not in f:
            raise ValidationError(f"{where}[{i}]: needs 'lambda' and 'matrix'")
        out.append((float(f["lambda"]), complex_matrix(f["matrix"], f"{where}[{i}].matrix")))
    return out
