import math

import numpy as np
import pytest
from scipy.linalg import expm

from app.services.bathlib import PseudomodeParams, UnderdampedBath, power_spectrum
from app.services.dynamics import (
    ALL_UP,
    RANDOM_PURE,
    Trajectory,
    bms_build,
    bms_evolve,
    bms_stationary,
    connected_levels,
    default_step,
    energy_error_observable,
    evolve,
    fidelity_subspace,
    generator_apply,
    gibbs_reference,
    gibbs_state,
    hybridized_reference,
    initial_state,
    null_space_steady_state,
    reduced_system,
    standard_observables,
    steady_state,
    system_state,
    trace_distance,
    vectorized_generator,
)
from app.models import RunConfig
from app.services.errors import ArgumentError, DimensionError, IntegrationError
from app.services.modelkit import (
    CouplingSchedule,
    IsingSpec,
    build_ising,
    build_q,
    compose,
    ground_info,
)
from app.services.pipelines import MODEL_FULL, build_model, fit_modes, prepare, start_state
from app.services.tensorops import Op, annihilation, expect, identity, spin_mode_layout


def _decoupled(qubit, mode):
    h_s, q = qubit
    return compose(h_s, q, [mode], schedule=CouplingSchedule(((0.0, 0.0),)))


def _excited_mode_state(model):
    ds, dm = model.dims
    rho_s = np.diag([1.0, 0.0])
    one = np.zeros((dm, dm))
    one[1, 1] = 1.0
    return Op(model.layout, np.kron(rho_s, one))


def _mode_population(model, rho):
    a = annihilation(model.modes_layout, 0).data
    number = np.kron(np.eye(model.dims[0]), a.conj().T @ a)
    return expect(Op(model.layout, number), rho).real


def _exact(model, rho0, t):
    generator = vectorized_generator(model)
    dim = model.layout.total_dim
    return (expm(generator * t) @ rho0.data.reshape(-1)).reshape(dim, dim)


def _chain(n=3, j=0.7, q_coeffs=(1.0, 1.1, 0.9)):
    spec = IsingSpec(n_sites=n, g=1.0, j=j, q_coeffs=q_coeffs)
    return build_ising(spec), build_q(spec)


def test_generator_is_trace_free_for_imaginary_lambda_bar(qubit, random_density):
    h_s, q = qubit
    modes = [
        PseudomodeParams(omega=1.0, lam=0.3, lindblad_rate=1.0, truncation=2),
        PseudomodeParams(omega=0.0, lam=0.2, lindblad_rate=2.0, truncation=2, lambda_bar_power=1),
    ]
    model = compose(h_s, q, modes, lambda_bar=1j)
    rng = np.random.default_rng(5)
    arbitrary = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))

    for data in (random_density(8, seed=3), arbitrary):
        out = generator_apply(model, 0.0, Op(model.layout, data))
        assert abs(out.trace()) < 1e-12


@pytest.mark.parametrize("lambda_bar", [1.0, 1j])
def test_generator_matches_vectorized_form(qubit, random_density, lambda_bar):
    h_s, q = qubit
    modes = [
        PseudomodeParams(omega=1.0, lam=0.3, lindblad_rate=1.0, truncation=3),
        PseudomodeParams(omega=0.0, lam=0.2, lindblad_rate=2.0, truncation=2, lambda_bar_power=1),
    ]
    model = compose(h_s, q, modes, lambda_bar=lambda_bar)
    rho = random_density(12, seed=7)

    applied = generator_apply(model, 0.0, Op(model.layout, rho)).data
    vectorized = (vectorized_generator(model) @ rho.reshape(-1)).reshape(12, 12)

    np.testing.assert_allclose(applied, vectorized, atol=1e-12)


@pytest.mark.parametrize("t", [0.0, 3.0, 6.0])
def test_generator_matches_vectorized_form_across_schedule(qubit, t):
    h_s, q = qubit
    modes = [
        PseudomodeParams(omega=1.0, lam=0.3, lindblad_rate=1.0, truncation=3),
        PseudomodeParams(omega=0.0, lam=0.2, lindblad_rate=2.0, truncation=2, lambda_bar_power=1),
        PseudomodeParams(omega=0.0, lam=0.1, lindblad_rate=5.0, truncation=2, lambda_bar_power=1),
    ]
    schedule = CouplingSchedule(((0.0, 1.0), (2.0, 0.5), (5.0, 0.0)))
    model = compose(h_s, q, modes, lambda_bar=1j, schedule=schedule)
    rng = np.random.default_rng(9)
    rho = rng.normal(size=(24, 24)) + 1j * rng.normal(size=(24, 24))

    applied = generator_apply(model, t, Op(model.layout, rho)).data
    vectorized = (vectorized_generator(model, t) @ rho.reshape(-1)).reshape(24, 24)

    np.testing.assert_allclose(applied, vectorized, atol=1e-12)


def test_vectorized_generator_refuses_large_spaces():
    h_s, q = _chain(3)
    model = compose(h_s, q, [PseudomodeParams(omega=1.0, lam=0.1, lindblad_rate=1.0, truncation=9)])

    with pytest.raises(DimensionError):
        vectorized_generator(model)


def test_decoupled_mode_decays_exponentially(qubit, cold_mode):
    model = _decoupled(qubit, cold_mode)

    trajectory = evolve(model, _excited_mode_state(model), [0.0, 1.0, 2.0], step=0.01)

    population = _mode_population(model, trajectory.final_state)
    assert population == pytest.approx(math.exp(-cold_mode.lindblad_rate * 2.0), abs=1e-8)


def test_decoupled_system_keeps_its_energy(qubit, qubit_ground, cold_mode):
    model = _decoupled(qubit, cold_mode)
    rho0 = initial_state(model, RANDOM_PURE, seed=3)
    energy = {"energy_error": energy_error_observable(qubit[0], qubit_ground.e_ground)}

    trajectory = evolve(model, rho0, np.linspace(0.0, 10.0, 11), energy)

    values = trajectory.series["energy_error"]
    assert np.max(np.abs(values - values[0])) < 1e-10


@pytest.mark.parametrize("lambda_bar", [1.0, 1j])
def test_evolution_matches_matrix_exponential(qubit, cold_mode, lambda_bar):
    h_s, q = qubit
    model = compose(h_s, q, [cold_mode], lambda_bar=lambda_bar)
    rho0 = initial_state(model, ALL_UP)

    trajectory = evolve(model, rho0, [0.0, 2.0], step=0.005)

    np.testing.assert_allclose(trajectory.final_state.data, _exact(model, rho0, 2.0), atol=1e-8)


def test_integrator_is_fourth_order(qubit, cold_mode):
    h_s, q = qubit
    model = compose(h_s, q, [cold_mode])
    rho0 = initial_state(model, ALL_UP)
    exact = _exact(model, rho0, 2.0)

    errors = [
        np.max(np.abs(evolve(model, rho0, [0.0, 2.0], step=h).final_state.data - exact))
        for h in (0.1, 0.05)
    ]

    assert 12.0 <= errors[0] / errors[1] <= 20.0


def test_trace_is_conserved_at_imaginary_lambda_bar(qubit):
    h_s, q = qubit
    modes = [
        PseudomodeParams(omega=1.0, lam=0.3, lindblad_rate=1.0, truncation=3),
        PseudomodeParams(omega=0.0, lam=0.2, lindblad_rate=2.0, truncation=2, lambda_bar_power=1),
    ]
    model = compose(h_s, q, modes, lambda_bar=1j)

    trajectory = evolve(model, initial_state(model), np.linspace(0.0, 5.0, 6))

    assert trajectory.trace_dev.max() <= 1e-8
    assert trajectory.herm_dev.max() <= 1e-6
    assert trajectory.step == pytest.approx(default_step(model))


def _lowest_eigenvalue(rho: Op) -> float:
    return float(np.linalg.eigvalsh(0.5 * (rho.data + rho.data.conj().T))[0])


@pytest.mark.parametrize("lambda_bar, floor", [(1j, -1e-4), (1.0, -1e-8)])
def test_reduced_state_stays_hermitian_and_positive(small_config, lambda_bar, floor):
    setup = prepare(RunConfig.from_dict(small_config))
    _, modes = fit_modes(setup)
    model = build_model(setup, modes, MODEL_FULL, lambda_bar=lambda_bar)

    trajectory = evolve(
        model,
        start_state(setup, model),
        np.linspace(0.0, 5.0, 11),
        {"lowest": _lowest_eigenvalue},
    )

    assert trajectory.trace_dev.max() <= 1e-8
    assert trajectory.herm_dev.max() <= 1e-6
    assert trajectory.series["lowest"].min() >= floor
    if model.physical:
        assert trajectory.final_state.hermiticity_defect() <= 1e-8
        assert _lowest_eigenvalue(trajectory.final_state) >= -1e-8


def test_evolve_validates_inputs(qubit, cold_mode):
    model = compose(*qubit, [cold_mode])
    rho0 = initial_state(model)

    with pytest.raises(ArgumentError):
        evolve(model, rho0, [0.0, 1.0, 1.0])
    with pytest.raises(ArgumentError):
        evolve(model, rho0, [-1.0, 1.0])
    with pytest.raises(DimensionError):
        evolve(model, identity(spin_mode_layout(1)), [0.0, 1.0])


def test_unstable_step_raises_integration_error(qubit, cold_mode):
    model = compose(*qubit, [cold_mode])

    with pytest.raises(IntegrationError) as excinfo:
        evolve(model, initial_state(model), np.linspace(0.0, 2000.0, 3), step=10.0)

    assert excinfo.value.time > 0


def test_steady_state_of_decoupled_mode_is_vacuum(qubit, cold_mode):
    model = _decoupled(qubit, cold_mode)

    result = steady_state(model, _excited_mode_state(model), tol=1e-10, t_cap=200.0)

    assert result.converged
    assert _mode_population(model, result.state) < 1e-8


def test_steady_state_matches_null_space(qubit, qubit_ground, cold_mode):
    model = compose(*qubit, [cold_mode])

    result = steady_state(model, initial_state(model), tol=1e-9, t_cap=500.0)
    reference = null_space_steady_state(model)

    assert result.converged
    assert trace_distance(result.state, reference) <= 1e-6
    fidelity = fidelity_subspace(reduced_system(model, reference), qubit_ground)
    assert fidelity.value > 0.9


def test_reduced_system_traces_out_every_mode(qubit, cold_mode, random_density):
    model = compose(*qubit, [cold_mode, cold_mode])
    rho_s = random_density(2, seed=1)
    vacuum = np.zeros((9, 9))
    vacuum[0, 0] = 1.0

    reduced = reduced_system(model, np.kron(rho_s, vacuum))

    assert reduced.layout == model.system_layout
    np.testing.assert_allclose(reduced.data, rho_s, atol=1e-12)


def test_steady_state_reports_cap(qubit, cold_mode):
    model = compose(*qubit, [cold_mode])

    result = steady_state(model, initial_state(model), tol=1e-14, t_cap=5.0)

    assert not result.converged
    assert result.time == pytest.approx(5.0)


def test_trajectory_columns_and_lengths():
    times = np.array([0.0, 1.0])
    series = {"purity": np.ones(2), "fidelity": np.zeros(2), "energy_error": np.ones(2)}

    trajectory = Trajectory(times, series, np.zeros(2), np.zeros(2))

    assert trajectory.columns() == [
        "time",
        "energy_error",
        "fidelity",
        "trace_dev",
        "herm_dev",
        "purity",
    ]
    assert trajectory.rows()[1] == [1.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    assert trajectory.at("energy_error", 0.9) == 1.0
    with pytest.raises(DimensionError):
        Trajectory(times, {"fidelity": np.zeros(3)}, np.zeros(2), np.zeros(2))


def test_system_states():
    layout = spin_mode_layout(2)

    mixed = system_state(layout)
    up = system_state(layout, ALL_UP)
    pure = system_state(layout, RANDOM_PURE, seed=1)

    np.testing.assert_allclose(mixed.data, np.eye(4) / 4)
    assert up.data[0, 0] == 1.0
    assert np.trace(pure.data @ pure.data).real == pytest.approx(1.0)
    np.testing.assert_allclose(system_state(layout, RANDOM_PURE, seed=1).data, pure.data)
    with pytest.raises(ArgumentError):
        system_state(layout, "thermal")


def test_fidelity_of_reference_states():
    ground = ground_info(build_ising(IsingSpec(n_sites=5, g=1.0, j=5.0)))
    layout = ground.projector.layout

    exact = fidelity_subspace(Op(layout, ground.projector.data / 2), ground)
    mixed = fidelity_subspace(Op(layout, np.eye(32) / 32), ground)
    overfull = fidelity_subspace(Op(layout, 1.2 * ground.projector.data / 2), ground)

    assert exact.value == pytest.approx(1.0)
    assert mixed.value == pytest.approx(0.0625)
    assert overfull.value == 1.0
    assert overfull.clipped == pytest.approx(0.2)


def test_fidelity_symmetrizes_non_hermitian_states(qubit_ground):
    layout = qubit_ground.projector.layout
    skewed = Op(layout, np.array([[1.0, 0.0], [0.5, 0.0]]))

    result = fidelity_subspace(skewed, qubit_ground)

    assert result.symmetrized
    assert result.value == pytest.approx(0.0)


def test_standard_observables_on_ground_state(qubit, qubit_ground):
    observables = standard_observables(qubit[0], qubit_ground)
    ground_state = Op(qubit_ground.projector.layout, qubit_ground.projector.data)

    assert observables["fidelity"](ground_state) == pytest.approx(1.0)
    assert observables["energy_error"](ground_state) == pytest.approx(0.0, abs=1e-12)


def _zero_temperature_spectrum(w):
    return 0.5 * w if w > 0 else 0.0


def test_zero_temperature_secular_equation_prepares_ground_state():
    h_s, q = _chain()
    ground = ground_info(h_s)
    genr = bms_build(ground.eig, q, _zero_temperature_spectrum)

    stationary = bms_stationary(genr)

    assert fidelity_subspace(stationary, ground).value >= 1 - 1e-6
    assert all(tr.up_rate == 0.0 for tr in genr.transitions)


def test_zero_temperature_energy_never_increases():
    h_s, q = _chain()
    ground = ground_info(h_s)
    genr = bms_build(ground.eig, q, _zero_temperature_spectrum)
    observables = {"energy_error": energy_error_observable(h_s, ground.e_ground)}

    trajectory = bms_evolve(
        genr, system_state(h_s.layout), np.linspace(0.0, 10.0, 21), observables
    )

    assert np.all(np.diff(trajectory.series["energy_error"]) <= 1e-10)
    assert trajectory.trace_dev.max() <= 1e-10


def _relaxation_horizon(genr, decay_times=25.0):
    rates = genr.rate_matrix()
    populations = rates - np.diag(rates.sum(axis=0))
    decay = np.sort(-np.linalg.eigvals(populations).real)
    return decay_times / decay[1]


def test_secular_evolution_relaxes_to_ground_state():
    h_s, q = _chain()
    ground = ground_info(h_s)
    genr = bms_build(ground.eig, q, _zero_temperature_spectrum)
    horizon = _relaxation_horizon(genr)

    trajectory = bms_evolve(genr, system_state(h_s.layout), [0.0, horizon / 2, horizon])

    assert fidelity_subspace(trajectory.final_state, ground).value >= 1 - 1e-6


def test_secular_evolution_relaxes_to_gibbs_state():
    h_s, q = _chain()
    ground = ground_info(h_s)
    warm = UnderdampedBath(lam=1.0, gamma=1.0, omega0=2.0, beta=1.0)
    genr = bms_build(ground.eig, q, lambda w: power_spectrum(warm, w))
    horizon = _relaxation_horizon(genr)

    trajectory = bms_evolve(genr, system_state(h_s.layout), [0.0, horizon / 2, horizon])

    assert trace_distance(trajectory.final_state, gibbs_state(h_s, 1.0)) <= 1e-6
    assert trajectory.herm_dev.max() <= 1e-10


def test_thermal_secular_equation_reaches_gibbs_state():
    h_s, q = _chain()
    ground = ground_info(h_s)
    warm = UnderdampedBath(lam=1.0, gamma=1.0, omega0=2.0, beta=1.0)
    genr = bms_build(ground.eig, q, lambda w: power_spectrum(warm, w))

    stationary = bms_stationary(genr)

    assert trace_distance(stationary, gibbs_state(h_s, 1.0)) <= 1e-6
    for tr in genr.transitions:
        if tr.weight > 1e-12:
            assert tr.up_rate == pytest.approx(tr.down_rate * math.exp(-tr.gap), rel=1e-9)


def test_transition_weights_are_symmetric():
    h_s, q = _chain()
    ground = ground_info(h_s)
    genr = bms_build(ground.eig, q, _zero_temperature_spectrum)

    weights = np.abs(genr.eig.to_eigenbasis(q.data)) ** 2

    np.testing.assert_allclose(weights, weights.T, atol=1e-14)
    assert all(tr.gap > 0 for tr in genr.transitions)


def test_negative_spectrum_values_are_clipped(caplog):
    h_s, q = _chain()
    ground = ground_info(h_s)

    genr = bms_build(ground.eig, q, lambda w: w)

    assert genr.clipped_rate > 0
    assert all(tr.up_rate == 0.0 and tr.down_rate > 0 for tr in genr.transitions)
    assert "Clipped negative spectrum" in caplog.text


def test_gibbs_state_limits():
    h_s, _ = _chain()
    ground = ground_info(h_s)

    cold = gibbs_state(h_s, 1e3)
    hot = gibbs_state(h_s, 1e-9)

    assert trace_distance(cold, Op(h_s.layout, ground.projector.data)) <= 1e-9
    assert trace_distance(hot, Op(h_s.layout, np.eye(8) / 8)) <= 1e-6
    with pytest.raises(ArgumentError):
        gibbs_state(h_s, math.inf)


def test_gibbs_reference_restricted_to_connected_levels():
    h_s, q = _chain(q_coeffs=(0.0, 0.0, 1.0))
    ground = ground_info(h_s)

    reference = gibbs_reference(h_s, q, 1.0, ground)

    assert len(reference.connected) <= 4
    assert reference.connected == tuple(connected_levels(ground.eig, q, [0]))
    assert reference.fidelity_restricted > reference.fidelity_full


def test_hybridized_reference_without_coupling_is_exact():
    h_s, q = _chain()
    ground = ground_info(h_s)
    mode = PseudomodeParams(omega=ground.e01, lam=0.0, lindblad_rate=1.0, truncation=3)

    assert hybridized_reference(h_s, q, mode, ground).value == pytest.approx(1.0)


def test_hybridized_reference_drops_with_coupling():
    h_s, q = _chain()
    ground = ground_info(h_s)

    values = [
        hybridized_reference(
            h_s,
            q,
            PseudomodeParams(omega=ground.e01, lam=lam, lindblad_rate=1.0, truncation=3),
            ground,
        ).value
        for lam in (0.1, 0.2, 0.4)
    ]

    assert values[0] > values[1] > values[2]
    assert values[0] > 0.95
