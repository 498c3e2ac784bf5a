from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from pfmc import fock
from pfmc.errors import ValidationError
from pfmc.maps import (GaussianMap, LatticeSpec, Link, compose, diagonal_phase, hirsch_lambda,
                       hopping_evolution, hs_field_matrix, hs_propagator, parity_map,
                       random_unitary, walker_propagator)


def test_identity_map():
    g = GaussianMap.identity(4)
    assert g.is_unitary and g.op_norm == 1.0 and g.num_modes == 4


def test_unitary_flag_is_checked():
    with pytest.raises(ValidationError, match="unitary"):
        GaussianMap(2 * np.eye(3), True)


def test_from_matrix_detects_unitarity(rng):
    assert GaussianMap.from_matrix(random_unitary(rng, 5).matrix).is_unitary
    g = GaussianMap.from_matrix(2 * np.eye(3))
    assert not g.is_unitary and g.op_norm == pytest.approx(2.0)


def test_non_square_rejected():
    with pytest.raises(ValidationError):
        GaussianMap(np.zeros((2, 3)))


def test_compose_and_adjoint(rng):
    u, v = random_unitary(rng, 4), random_unitary(rng, 4)
    w = compose(u, v)
    assert w.is_unitary
    assert np.allclose(w.matrix, u.matrix @ v.matrix)
    assert np.allclose((u @ u.adjoint()).matrix, np.eye(4))


def test_zero_phases_identity():
    assert np.allclose(diagonal_phase([0, 0, 0]).matrix, np.eye(3))


def test_pi_phases_are_parity_map():
    assert np.allclose(diagonal_phase([math.pi, 0, math.pi, 0]).matrix,
                       parity_map(4, [0, 2]).matrix)


def test_rectangular_lattice_links():
    lat = LatticeSpec.rectangular(3, 2)
    assert lat.num_sites == 6 and lat.num_modes == 12
    assert len(lat.links) == 7
    assert lat.meta["phases"] == "default-zero"
    assert lat.site_modes(4) == (4, 10)


def test_lattice_rejects_long_link():
    with pytest.raises(ValidationError, match="nearest"):
        LatticeSpec(3, 1, (Link(0, 2),))


def test_lattice_rejects_duplicate_link():
    with pytest.raises(ValidationError, match="more than once"):
        LatticeSpec(2, 1, (Link(0, 1), Link(1, 0)))


def test_lattice_json_roundtrip():
    lat = LatticeSpec(2, 2, (Link(0, 1, 0.3), Link(0, 2), Link(1, 3), Link(2, 3)), 0.7)
    back = LatticeSpec.from_json(lat.to_json())
    assert back == lat


def test_hopping_matrix_is_hermitian():
    lat = LatticeSpec(2, 2, (Link(0, 1, 0.3), Link(0, 2, -0.2), Link(1, 3), Link(2, 3)))
    h = lat.hopping_matrix()
    assert np.allclose(h, h.conj().T)


def test_evolution_at_zero_time_is_identity():
    lat = LatticeSpec.rectangular(2, 2)
    assert np.allclose(hopping_evolution(lat, 0.0).matrix, np.eye(8))


def test_dimer_full_transfer():
    lat = LatticeSpec.rectangular(2, 1)
    u = hopping_evolution(lat, math.pi / 2).matrix
    assert abs(u[0, 1]) == pytest.approx(1.0)
    assert abs(u[0, 0]) == pytest.approx(0.0, abs=1e-12)
    t = 0.3
    assert abs(hopping_evolution(lat, t).matrix[1, 0]) ** 2 == pytest.approx(math.sin(t) ** 2)


def test_hirsch_lambda_zero():
    assert hirsch_lambda(0.0, 0.5) == 0


@pytest.mark.parametrize("w, dt, expected", [
    (4.0, 0.25, 0.64643391 + 0.76481789j),
    (4.0, 0.5, 0.82168347 + 1.16128945j),
    (8.0, 0.5, 0.84815928 + 1.87671433j),
])
def test_hirsch_lambda_frozen(w, dt, expected):
    lam = hirsch_lambda(w, dt)
    assert lam == pytest.approx(expected, abs=1e-8)
    assert abs(np.cosh(lam) - np.exp(0.5j * w * dt)) <= 1e-12


def test_hirsch_lambda_branch_point():
    lam = hirsch_lambda(2 * math.pi, 1.0)
    assert lam.real == pytest.approx(0.0, abs=1e-7)
    assert lam.imag == pytest.approx(math.pi, abs=1e-7)


def test_field_average_reproduces_interaction_phase():
    w, dt = 3.0, 0.4
    lam = hirsch_lambda(w, dt)
    avg = sum(np.array([1.0, *hs_field_matrix(lam, np.array([s]), 1)]) for s in (1, -1)) / 2
    up, down = avg[1], avg[2]
    # empty, up-only, down-only, doubly occupied
    diag = np.array([1.0, up, down, 0.5 * sum(
        np.prod(hs_field_matrix(lam, np.array([s]), 1)) for s in (1, -1))])
    phase = np.exp(0.5j * w * dt)
    assert np.allclose(diag, [1, phase, phase, 1])


def test_hs_propagator_without_interaction():
    lat = LatticeSpec.rectangular(2, 1)
    path = [[1, -1], [-1, -1], [1, 1]]
    g = hs_propagator(lat, 0.0, 0.2, path)
    assert np.allclose(g.matrix, hopping_evolution(lat, 0.6).matrix)


def test_hs_propagator_rejects_bad_fields():
    lat = LatticeSpec.rectangular(2, 1)
    with pytest.raises(ValidationError):
        hs_propagator(lat, 1.0, 0.2, [[1, 0]])
    with pytest.raises(ValidationError):
        hs_propagator(lat, 1.0, 0.2, [[1, 1, 1]])


def test_hs_path_average_matches_trotter_step():
    lat = LatticeSpec.rectangular(2, 1)
    w, dt = 2.0, 0.3
    total = np.zeros(16, dtype=complex)
    start = np.zeros(16, dtype=complex)
    start[0b0101] = 1.0  # sites 0 and 1 spin up... modes 0 and 2
    for sigma in itertools.product((1, -1), repeat=2):
        total += fock.apply_map(hs_propagator(lat, w, dt, [sigma]), start) / 4
    half = hopping_evolution(lat, dt / 2)
    occ = fock.occupations(4)
    inter = np.exp(-1j * w * dt * (occ[:, 0] * occ[:, 2] + occ[:, 1] * occ[:, 3]))
    shift = np.exp(0.5j * w * dt * occ.sum(axis=1))
    ref = fock.apply_map(half, shift * inter * fock.apply_map(half, start))
    assert np.allclose(total, ref, atol=1e-12)


def test_walker_propagator_is_positive_real_for_real_fields():
    lat = LatticeSpec.rectangular(2, 1)
    g = walker_propagator(lat, 2.0, 0.1, [[1, -1], [1, 1]])
    assert not g.is_unitary
    assert np.allclose(g.matrix.imag, 0)


def test_walker_propagator_rejects_nonpositive_step():
    with pytest.raises(ValidationError):
        walker_propagator(LatticeSpec.rectangular(2, 1), 1.0, 0.0, [[1, 1]])
