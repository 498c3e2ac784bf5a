from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from pfmc import fock
from pfmc.errors import CapacityError, ValidationError
from pfmc.estimators import (MAX_SAMPLES, ApsgBra, ConstantShot, Mixture, PhaseGate,
                             ProductShot, ZeroShot, apsg_overlap_exact, charge_phase_factor,
                             estimate_apsg_overlap, estimate_binned_distribution,
                             estimate_extent_overlap, estimate_fock_overlap, estimate_hs_parity,
                             estimate_marginal, estimate_transition_correlator,
                             estimate_wilson_loop, evaluate_shots, fock_overlap_exact,
                             hamiltonian_transition_element, hoeffding_epsilon,
                             hoeffding_samples, hs_bounds, median_of_means,
                             median_of_means_plan, one_shot_fock, run_shots,
                             transition_rdm_element, wilson_loop_enumerated)
from pfmc.maps import LatticeSpec, diagonal_phase, hopping_evolution, random_unitary
from pfmc.states import (ApsgBlock, ApsgState, FockState, apsg_to_statevector,
                         oracle_amplitude, psi4_product, random_apsg, slot_patterns)


def random_matrix(rng, m, scale=1.0):
    return scale * (rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))) / math.sqrt(2 * m)


def dense_transition(op, left, right, phi, psi):
    return fock.oracle_transition(op, left, right, phi, psi)


# --- budgets ----------------------------------------------------------------


def test_hoeffding_reference_value():
    assert hoeffding_samples(1.0, 0.01, 0.01) == 105967
    assert hoeffding_samples(1.0, 0.01, 0.01) == math.ceil(2 * math.log(200) * 1e4)


def test_hoeffding_complex_form():
    assert hoeffding_samples(1.0, 0.1, 0.1, complex_valued=True) == math.ceil(
        4 * math.log(40) / 0.01)


def test_hoeffding_zero_and_infinite_bounds():
    assert hoeffding_samples(0.0, 0.1, 0.1) == 0
    assert hoeffding_samples(1e300, 1e-3, 0.1) == math.inf


@pytest.mark.parametrize("complex_valued", [False, True])
def test_hoeffding_epsilon_inverts_budget(complex_valued):
    k = hoeffding_samples(2.5, 0.03, 0.05, complex_valued)
    assert hoeffding_epsilon(2.5, k, 0.05, complex_valued) <= 0.03


@pytest.mark.parametrize("eps, delta", [(0, 0.1), (0.1, 0), (0.1, 1.0), (-1, 0.5)])
def test_budget_validation(eps, delta):
    with pytest.raises(ValidationError):
        hoeffding_samples(1.0, eps, delta)


def test_median_of_means_one_group_is_mean(rng):
    x = rng.normal(size=101)
    assert median_of_means(x, 1) == pytest.approx(x.mean())


def test_median_of_means_constant():
    assert median_of_means(np.full(30, 2.5 - 1j), 7) == 2.5 - 1j


def test_median_of_means_empty():
    with pytest.raises(ValidationError):
        median_of_means(np.zeros(0), 3)


def test_median_of_means_plan():
    groups, size = median_of_means_plan(1.0, 0.1, 0.01)
    assert groups == math.ceil(8 * math.log(200))
    assert size == math.ceil(4 / 0.01)


# --- composite one-shots -------------------------------------------------------


def test_mixture_of_constants_is_unbiased(rng):
    mix = Mixture([(2.0, ConstantShot(1.0)), (-1.0, ConstantShot(0.5j)), (3.0, ZeroShot())])
    assert mix.bound == pytest.approx(2.5)
    assert run_shots(mix, 0.02, 0.01, seed=1).value == pytest.approx(2 - 0.5j, abs=0.02)


def test_product_shot_bounds():
    prod = ProductShot(ConstantShot(2.0), ConstantShot(-0.5))
    assert prod.bound == pytest.approx(1.0) and prod.moment == pytest.approx(1.0)
    assert prod.draw(np.random.default_rng(0), 3) == pytest.approx(np.full(3, -1.0))


def test_zero_shot_costs_nothing():
    est = run_shots(ZeroShot(), 0.1, 0.1, seed=0)
    assert est.value == 0 and est.samples == 0


def test_run_shots_meets_budget():
    est = run_shots(ConstantShot(1.0), 0.05, 0.05, seed=0, aggregation="mean")
    assert est.samples >= hoeffding_samples(est.bound, 0.05, 0.05, complex_valued=True)


def test_run_shots_explicit_samples_record_guaranteed_accuracy():
    est = run_shots(ConstantShot(1.0), 0.05, 0.05, seed=0, samples=100, aggregation="mean")
    assert est.samples == 100
    assert est.meta["requested_epsilon"] == 0.05
    assert est.epsilon == pytest.approx(hoeffding_epsilon(1.0, 100, 0.05, True))


def test_run_shots_capacity_guard():
    with pytest.raises(CapacityError) as info:
        run_shots(ConstantShot(1e4), 1e-3, 0.01, seed=0)
    assert info.value.guard == MAX_SAMPLES


def test_run_shots_median_of_means():
    est = run_shots(ConstantShot(0.3), 0.05, 0.05, seed=0, aggregation="mom")
    assert est.value == pytest.approx(0.3)
    assert "median-of-means" in est.method


# --- Fock and paired overlaps ------------------------------------------------------


def test_one_shot_sign_validation():
    psi = psi4_product(2)
    x = FockState(8, (0, 1, 4, 5))
    with pytest.raises(ValidationError):
        one_shot_fock(np.eye(8), psi, x, [1])
    with pytest.raises(ValidationError):
        one_shot_fock(np.eye(8), psi, x, [1, 0])


@pytest.mark.parametrize("unitary", [True, False])
def test_exact_sign_average_matches_oracle(rng, unitary):
    psi = random_apsg(rng, 10, [2, 1, 2])
    g = random_unitary(rng, 10).matrix if unitary else random_matrix(rng, 10, 1.5)
    for _ in range(4):
        x = FockState(10, tuple(sorted(rng.choice(10, size=6, replace=False))))
        assert fock_overlap_exact(g, psi, x) == pytest.approx(
            oracle_amplitude(x, g, psi), abs=1e-10)
        average = np.mean([one_shot_fock(g, psi, x, s)
                           for s in itertools.product((1, -1), repeat=3)])
        assert psi.gamma * average == pytest.approx(oracle_amplitude(x, g, psi), abs=1e-10)


def test_particle_number_mismatch_is_exact_zero(rng):
    psi = psi4_product(1)
    x = FockState(4, (0,))
    assert one_shot_fock(np.eye(4), psi, x, [1]) == 0
    est = estimate_fock_overlap(np.eye(4), psi, x, 0.05, 0.05, seed=1)
    assert est.value == 0 and est.samples == 0


def test_fock_overlap_estimate_psi4():
    psi = psi4_product(2)
    x = FockState(8, (0, 1, 4, 5))
    est = estimate_fock_overlap(np.eye(8), psi, x, 0.05, 0.01, seed=3)
    assert est.value == pytest.approx(0.5, abs=0.05)
    assert est.meta["gamma"] == pytest.approx(0.5)


def test_fock_overlap_estimate_random(rng):
    psi = random_apsg(rng, 8, [2, 2])
    g = random_unitary(rng, 8)
    x = FockState(8, (0, 2, 5, 7))
    est = estimate_fock_overlap(g, psi, x, 0.05, 0.01, seed=4)
    assert abs(est.value - oracle_amplitude(x, g, psi)) <= 0.05


def test_apsg_overlap_exact_matches_statevector(rng):
    for unitary in (True, False):
        phi = random_apsg(rng, 8, [2, 1])
        psi = random_apsg(rng, 8, [1, 2])
        g = random_unitary(rng, 8).matrix if unitary else random_matrix(rng, 8, 2.0)
        ref = np.vdot(apsg_to_statevector(phi), fock.apply_map(g, apsg_to_statevector(psi)))
        assert apsg_overlap_exact(g, phi, psi) == pytest.approx(ref, abs=1e-10)


def test_apsg_overlap_identity_normalization():
    psi = psi4_product(2)
    assert apsg_overlap_exact(np.eye(8), psi, psi) == pytest.approx(1.0)
    est = estimate_apsg_overlap(np.eye(8), psi, psi, 0.05, 0.05, seed=0)
    assert est.value == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("theta", [0.3, math.pi / 2])
def test_apsg_overlap_phase_on_one_pair(theta):
    psi = psi4_product(1)
    g = diagonal_phase([theta, theta, 0, 0])
    expected = (np.exp(2j * theta) + 1) / 2
    assert apsg_overlap_exact(g, psi, psi) == pytest.approx(expected, abs=1e-12)


def test_apsg_overlap_estimate_random(rng):
    phi = random_apsg(rng, 8, [2, 1])
    psi = random_apsg(rng, 8, [1, 2])
    g = random_unitary(rng, 8)
    est = estimate_apsg_overlap(g, phi, psi, 0.05, 0.01, seed=5)
    assert abs(est.value - apsg_overlap_exact(g, phi, psi)) <= 0.05


def test_apsg_bra_moment_bound_by_enumeration(rng):
    """Second moment over bra slots and signs is at most ||G||^{4N}."""
    phi = random_apsg(rng, 8, [2, 2])
    psi = random_apsg(rng, 8, [2, 1])
    g = random_matrix(rng, 8, 1.3)
    norm = np.linalg.norm(g, 2)
    second = 0.0
    for _, weight, modes in slot_patterns(phi):
        prob = abs(weight) ** 2
        rows = np.array(modes)[None, :]
        for signs in itertools.product((1.0, -1.0), repeat=2):
            z = evaluate_shots(rows, np.array([1 / np.conj(weight)]), np.eye(8), (None, None),
                               g, psi, np.array([signs]))[0]
            second += prob / 4 * abs(z) ** 2
    assert second <= norm ** 8 + 1e-9


def test_apsg_bra_weight_bound():
    phi = ApsgState(4, (ApsgBlock((0, 1, 2, 3), (0.6, 0.8)),))
    assert ApsgBra(phi).weight_bound == pytest.approx(1 / 0.6)


# --- correlators, marginals, distributions ----------------------------------------


def test_correlator_pair_occupation():
    psi = psi4_product(1)
    est = estimate_transition_correlator(np.eye(4), np.eye(4), psi, psi, [0, 1], 0.05, 0.05,
                                         seed=1)
    assert est.value == pytest.approx(0.5, abs=0.05)


def test_correlator_empty_set_is_overlap(rng):
    phi = random_apsg(rng, 8, [2, 1])
    psi = random_apsg(rng, 8, [1, 2])
    u, v = random_unitary(rng, 8), random_unitary(rng, 8)
    est = estimate_transition_correlator(u, v, phi, psi, [], 0.05, 0.01, seed=2)
    ref = apsg_overlap_exact(u.matrix.conj().T @ v.matrix, phi, psi)
    assert abs(est.value - ref) <= 0.05


def test_correlator_random_matches_oracle(rng):
    phi = random_apsg(rng, 12, [2, 1, 1])
    psi = random_apsg(rng, 12, [1, 2, 2])
    u, v = random_unitary(rng, 12), random_unitary(rng, 12)
    modes = [0, 3, 5, 8, 11]
    est = estimate_transition_correlator(u, v, phi, psi, modes, 0.05, 0.01, seed=3)
    ref = dense_transition(fock.number_product(modes), u, v, phi, psi)
    assert abs(est.value - ref) <= 0.05


def test_correlator_rejects_bad_modes():
    psi = psi4_product(1)
    with pytest.raises(ValidationError):
        estimate_transition_correlator(np.eye(4), np.eye(4), psi, psi, [0, 0], 0.1, 0.1, 0)
    with pytest.raises(ValidationError):
        estimate_transition_correlator(np.eye(4), np.eye(4), psi, psi, [4], 0.1, 0.1, 0)


def test_marginal_trivial_cases():
    psi = psi4_product(1)
    assert estimate_marginal(np.eye(4), psi, [0], [1], 0.05, 0.05, 0).value == \
        pytest.approx(0.5, abs=0.05)
    assert estimate_marginal(np.eye(4), psi, [], [], 0.05, 0.05, 0).value == pytest.approx(1.0)


def test_marginal_random_matches_oracle(rng):
    psi = random_apsg(rng, 8, [2, 2])
    u = random_unitary(rng, 8)
    probs = np.abs(fock.apply_map(u, apsg_to_statevector(psi))) ** 2
    occ = fock.occupations(8)
    modes, pattern = [1, 4, 6], [1, 0, 1]
    ref = probs[np.all(occ[:, modes] == pattern, axis=1)].sum()
    est = estimate_marginal(u, psi, modes, pattern, 0.05, 0.01, seed=9)
    assert abs(est.value - ref) <= 0.05


def test_marginal_requires_unitary(rng):
    with pytest.raises(ValidationError):
        estimate_marginal(2 * np.eye(4), psi4_product(1), [0], [1], 0.1, 0.1, 0)


def test_binned_fixed_particle_number():
    dist = estimate_binned_distribution(np.eye(4), psi4_product(1), [1, 1, 1, 1], 0.05, 0.05, 0)
    assert dist.values == pytest.approx([0, 0, 1, 0, 0], abs=0.05)


def test_binned_block_superposition():
    dist = estimate_binned_distribution(np.eye(4), psi4_product(1), [1, 1, 0, 0], 0.05, 0.05, 0)
    assert dist.values == pytest.approx([0.5, 0, 0.5], abs=0.05)


@pytest.mark.parametrize("weights", [[1, 1, 1, 0, 0, 0], [2, 0, 1, 1, 0, 1], [1, 2, 0, 1, 0, 0]])
def test_binned_random_matches_histogram(rng, weights):
    psi = random_apsg(rng, 6, [2, 1])
    u = random_unitary(rng, 6)
    probs = np.abs(fock.apply_map(u, apsg_to_statevector(psi))) ** 2
    omega = fock.occupations(6) @ np.array(weights)
    hist = np.bincount(omega, weights=probs, minlength=sum(weights) + 1)
    dist = estimate_binned_distribution(u, psi, weights, 0.05, 0.05, seed=11)
    assert np.max(np.abs(dist.values - hist)) <= 0.05


def test_binned_guard():
    with pytest.raises(CapacityError):
        estimate_binned_distribution(np.eye(4), psi4_product(1), [5000, 0, 0, 0], 0.1, 0.1, 0)


# --- reduced density matrices and Hamiltonians -----------------------------------------


def test_rdm_one_body_trivial():
    psi = psi4_product(1)
    eye = np.eye(4)
    assert transition_rdm_element(eye, eye, psi, psi, (0, 0), 0.05, 0.05, 0).value == \
        pytest.approx(0.5, abs=0.05)
    assert transition_rdm_element(eye, eye, psi, psi, (0, 2), 0.05, 0.05, 0).value == \
        pytest.approx(0.0, abs=0.05)


@pytest.mark.parametrize("indices", [(0, 1, 2, 3), (1, 2, 2, 4), (3, 0, 0, 5)])
def test_rdm_two_body_matches_oracle(rng, indices):
    phi = random_apsg(rng, 8, [2, 1])
    psi = random_apsg(rng, 8, [1, 2])
    u, v = random_unitary(rng, 8), random_unitary(rng, 8)
    est = transition_rdm_element(u, v, phi, psi, indices, 0.05, 0.01, seed=12, samples=400_000)
    ref = dense_transition(fock.two_body(*indices), u, v, phi, psi)
    assert abs(est.value - ref) <= max(5 * est.std_error, 1e-3)
    assert est.meta["bias"] == 0.0


def test_rdm_index_validation():
    psi = psi4_product(1)
    with pytest.raises(ValidationError):
        transition_rdm_element(np.eye(4), np.eye(4), psi, psi, (0, 1, 2), 0.1, 0.1, 0)


def test_hamiltonian_constant_term(rng):
    phi = random_apsg(rng, 8, [2, 1])
    psi = random_apsg(rng, 8, [1, 2])
    u, v = random_unitary(rng, 8), random_unitary(rng, 8)
    est = hamiltonian_transition_element(u, v, phi, psi, None, [], 0.7, 0.05, 0.01, seed=1)
    ref = 0.7 * apsg_overlap_exact(u.matrix.conj().T @ v.matrix, phi, psi)
    assert abs(est.value - ref) <= 0.05


def test_hamiltonian_number_operator():
    psi = psi4_product(2)
    est = hamiltonian_transition_element(np.eye(8), np.eye(8), psi, psi, np.eye(8), [], 0.0,
                                         0.1, 0.05, seed=2, samples=100_000)
    assert est.value == pytest.approx(4.0, abs=5 * est.std_error)


def test_hamiltonian_sum_of_squares_matches_oracle(rng):
    psi = psi4_product(1)
    h1 = np.array([[0, -1, 0, 0], [-1, 0, 0, 0], [0, 0, 0, -1], [0, 0, -1, 0]], dtype=complex)
    square = np.diag([1.0, 0, 0, 1.0]).astype(complex)
    u = hopping_evolution(LatticeSpec.rectangular(2, 1), 0.4)
    est = hamiltonian_transition_element(u, u, psi, psi, h1, [(2.0, square)], 0.0, 0.05, 0.01,
                                         seed=3, samples=200_000)
    op = fock.sum_operator([(1.0, fock.one_body(h1)),
                            (1.0, fock.product_operator(fock.one_body(square),
                                                        fock.one_body(square)))])
    ref = fock.oracle_transition(op, u, u, psi, psi)
    assert abs(est.value - ref) <= 5 * est.std_error


# --- Wilson loops ----------------------------------------------------------------------


def test_charge_phase_decomposition():
    assert [charge_phase_factor(q) for q in (0, 1, 2)] == pytest.approx([1, 1, 0], abs=1e-14)


def test_wilson_enumeration_matches_oracle(rng):
    lat = LatticeSpec.rectangular(2, 2)
    psi = random_apsg(rng, 8, [1, 2, 1])
    u = hopping_evolution(lat, 0.7)
    ref = np.vdot(fock.apply_map(u, apsg_to_statevector(psi)),
                  fock.wilson_loop([0, 1, 3, 2], 4)(fock.apply_map(u, apsg_to_statevector(psi))))
    assert wilson_loop_enumerated(u, psi, [0, 1, 3, 2]) == pytest.approx(ref, abs=1e-10)


def test_wilson_estimate_matches_oracle(rng):
    lat = LatticeSpec.rectangular(2, 2)
    psi = random_apsg(rng, 8, [1, 2, 1])
    u = hopping_evolution(lat, 0.7)
    ref = wilson_loop_enumerated(u, psi, [0, 1, 3, 2]).real
    est = estimate_wilson_loop(u, psi, [0, 1, 3, 2], 0.05, 0.01, seed=4)
    assert abs(est.value - ref) <= 0.05


def test_wilson_rejects_repeated_site():
    psi = psi4_product(1)
    with pytest.raises(ValidationError):
        estimate_wilson_loop(np.eye(4), psi, [0, 0], 0.1, 0.1, 0)


# --- auxiliary-field and extent estimators --------------------------------------------


def doublon_holon_state() -> ApsgState:
    return ApsgState(4, (ApsgBlock((0, 2), (1.0,)),))


def test_hs_parity_without_interaction_matches_free_evolution():
    lat = LatticeSpec.rectangular(2, 1)
    psi = doublon_holon_state()
    est = estimate_hs_parity(lat, 0.0, 0.25, 2, psi, [0], 0.05, 0.05, seed=1)
    u = hopping_evolution(lat, 0.5)
    ref = fock.oracle_expectation(fock.parity_string([0]), u, psi).real
    assert est.value == pytest.approx(ref, abs=0.05)


def test_hs_parity_empty_set_is_norm():
    lat = LatticeSpec.rectangular(2, 1)
    est = estimate_hs_parity(lat, 0.0, 0.25, 2, doublon_holon_state(), [], 0.05, 0.05, seed=1)
    assert est.value == pytest.approx(1.0, abs=1e-12)


def test_hs_bounds_without_interaction():
    env = hs_bounds(0.0, 0.1, 5, 4, 2)
    assert env["a"] == 0 and env["B_worst"] == 1 and env["B_typ"] == 1


def test_hs_envelope_validation():
    lat = LatticeSpec.rectangular(2, 1)
    with pytest.raises(ValidationError):
        estimate_hs_parity(lat, 1.0, 0.25, 2, doublon_holon_state(), [0], 0.1, 0.1, 0,
                           envelope="optimistic")


def test_extent_without_gates_is_overlap(rng):
    phi = random_apsg(rng, 6, [2, 1])
    psi = random_apsg(rng, 6, [1, 2])
    u = random_unitary(rng, 6)
    est = estimate_extent_overlap([u], phi, psi, 0.05, 0.01, seed=2)
    assert est.meta["extent"] == pytest.approx(1.0)
    assert abs(est.value - apsg_overlap_exact(u, phi, psi)) <= 0.05


def test_extent_zero_angle_gate():
    psi = psi4_product(1)
    est = estimate_extent_overlap([PhaseGate(0, 2, 0.0)], psi, psi, 0.05, 0.05, seed=0)
    assert est.meta["extent"] == pytest.approx(1.0)
    assert est.value == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("theta", [-0.1, 2.0])
def test_extent_gate_angle_range(theta):
    with pytest.raises(ValidationError):
        PhaseGate(0, 1, theta)
