from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from app.jobs.pool import run_ordered
from app.models import RunConfig
from app.services.bathlib import (
    ExpFitResult,
    FitWindow,
    PseudomodeParams,
    UnderdampedBath,
    exact_decomposition,
    fit_document,
    fit_matsubara,
    mode_spectrum,
    power_spectrum,
    s_fit,
    t_eff,
    t_eff_grid,
    to_pseudomodes,
)
from app.services.continuation import (
    ErrorRow,
    PolyModel,
    SweepPlan,
    SweepSample,
    continue_to_imag,
    error_vs_nm,
    fit_poly,
    run_sweep,
)
from app.services.dynamics import (
    BMSGenerator,
    Trajectory,
    bms_build,
    bms_evolve,
    evolve,
    gibbs_reference,
    hybridized_reference,
    initial_state,
    reduced_system,
    standard_observables,
    steady_state,
    system_state,
)
from app.services.errors import ArgumentError, DomainError
from app.services.modelkit import (
    BathRecipe,
    CompositeModel,
    CouplingSchedule,
    GroundInfo,
    IsingSpec,
    assemble,
    build_ising,
    build_q,
    ground_info,
    single_mode_model,
)
from app.services.tensorops import Op, expect

log = logging.getLogger(__name__)

MODEL_SINGLE = "single"
MODEL_FULL = "full"
MODEL_BMS = "bms"
MODEL_KINDS = (MODEL_SINGLE, MODEL_FULL, MODEL_BMS)
SPECTRUM_FIT = "fit"
SPECTRUM_RESONANT = "resonant"
SPECTRUM_KINDS = (SPECTRUM_FIT, SPECTRUM_RESONANT)

SPECTRA_POINTS = 400
SPECTRA_SPAN = 5.0
PHYSICAL_HERMITICITY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Setup:
    config: RunConfig
    spec: IsingSpec
    h_s: Op
    q: Op
    ground: GroundInfo
    bath: UnderdampedBath

    @property
    def g(self) -> float:
        return self.spec.g

    def observables(self) -> dict:
        return standard_observables(self.h_s, self.ground, self.g)

    def energy(self, rho_s: Op) -> float:
        return expect(self.h_s, rho_s).real


def bath_recipe(cfg: RunConfig) -> BathRecipe:
    section = cfg.bath
    return BathRecipe(
        omega0=section.omega0,
        omega0_e01_multiple=section.omega0_e01_multiple,
        gamma=section.gamma,
        gamma_omega0_multiple=section.gamma_omega0_multiple,
        lambda_prefactor=section.lambda_prefactor,
        beta=section.beta,
    )


def prepare(cfg: RunConfig, n_sites: int | None = None, omega0: float | None = None) -> Setup:
    system = cfg.system
    spec = IsingSpec(
        n_sites=n_sites or system.n, g=system.g, j=system.j, q_coeffs=tuple(system.q_coeffs)
    )
    h_s = build_ising(spec)
    ground = ground_info(h_s, system.ground_gap_ratio)
    recipe = bath_recipe(cfg)
    if omega0 is not None:
        recipe = recipe.with_omega0(omega0)
    bath = recipe.resolve(spec.g, ground.e01)
    log.info(
        "N=%d chain: E_G=%.6g, E01=%.6g, degeneracy %d; bath omega0=%.6g gamma=%.6g lam=%.6g",
        spec.n_sites,
        ground.e_ground,
        ground.e01,
        ground.degeneracy,
        bath.omega0,
        bath.gamma,
        bath.lam,
    )
    return Setup(config=cfg, spec=spec, h_s=h_s, q=build_q(spec), ground=ground, bath=bath)


def fit_window(cfg: RunConfig, bath: UnderdampedBath) -> FitWindow:
    window = cfg.modes.fit_window
    return FitWindow(
        t_min=window.t_min_gamma / bath.Gamma,
        t_max=window.t_max_gamma / bath.Gamma,
        n_points=window.n_points,
    )


def fit_modes(setup: Setup) -> tuple[ExpFitResult, list[PseudomodeParams]]:
    cfg = setup.config
    fit = fit_matsubara(
        setup.bath,
        n_terms=cfg.modes.n_fit_terms,
        window=fit_window(cfg, setup.bath),
        gate=cfg.modes.fit_gate,
    )
    return fit, to_pseudomodes(setup.bath, fit, cfg.modes.truncations)


def schedule_of(cfg: RunConfig) -> CouplingSchedule:
    return CouplingSchedule(tuple(cfg.schedule.segments))


def lambda_bar_sq(cfg: RunConfig) -> float:
    return float((cfg.modes.lambda_bar**2).real)


def build_model(
    setup: Setup,
    modes: list[PseudomodeParams],
    kind: str,
    lambda_bar: complex | None = None,
) -> CompositeModel:
    schedule = schedule_of(setup.config)
    if kind == MODEL_SINGLE:
        return single_mode_model(setup.spec, modes, schedule)
    if kind == MODEL_FULL:
        if lambda_bar is None:
            lambda_bar = setup.config.modes.lambda_bar
        return assemble(setup.spec, modes, lambda_bar, schedule)
    raise ArgumentError(f"no pseudomode model of kind {kind!r}")


def time_grid(t_max: float, n_times: int) -> np.ndarray:
    return np.linspace(0.0, t_max, n_times)


def start_state(setup: Setup, model: CompositeModel) -> Op:
    solver = setup.config.solver
    return initial_state(model, solver.initial_state, solver.seed)


def run_pseudomode(
    setup: Setup,
    modes: list[PseudomodeParams],
    kind: str,
    t_max: float | None = None,
    n_times: int | None = None,
) -> Trajectory:
    solver = setup.config.solver
    model = build_model(setup, modes, kind)
    grid = time_grid(t_max or solver.t_max, n_times or solver.n_times)
    return evolve(model, start_state(setup, model), grid, setup.observables(), step=solver.h)


def bms_spectrum(
    setup: Setup, modes: list[PseudomodeParams], kind: str
) -> Callable[[float], float]:
    if kind == SPECTRUM_RESONANT:
        return lambda w: mode_spectrum(modes[0], 1.0, w)
    if kind == SPECTRUM_FIT:
        weight = lambda_bar_sq(setup.config)
        return lambda w: s_fit(modes, weight, w)
    raise ArgumentError(f"unknown spectrum {kind!r}; choose one of {SPECTRUM_KINDS}")


def run_bms(
    setup: Setup, modes: list[PseudomodeParams], spectrum_kind: str = SPECTRUM_FIT
) -> tuple[Trajectory, BMSGenerator]:
    solver = setup.config.solver
    genr = bms_build(setup.ground.eig, setup.q, bms_spectrum(setup, modes, spectrum_kind))
    rho_s0 = system_state(setup.h_s.layout, solver.initial_state, solver.seed)
    grid = time_grid(solver.t_max, solver.n_times)
    trajectory = bms_evolve(genr, rho_s0, grid, setup.observables(), g=setup.g, step=solver.h)
    return trajectory, genr


def segment_summaries(trajectory: Trajectory, schedule: CouplingSchedule) -> list[dict]:
    summaries = []
    starts = schedule.starts
    t_last = float(trajectory.times[-1])
    for k, (t_start, scale) in enumerate(schedule.segments):
        if t_start > t_last:
            break
        t_end = starts[k + 1] if k + 1 < len(starts) else t_last
        # the sample just before the next switch closes this segment
        inside = np.flatnonzero((trajectory.times >= t_start) & (trajectory.times <= t_end))
        index = int(inside[-1]) if len(inside) else 0
        summary = {"t_start": t_start, "t_end": min(t_end, t_last), "scale": scale}
        for name, values in trajectory.series.items():
            summary[name] = float(values[index])
        summaries.append(summary)
    return summaries


def references(setup: Setup, modes: list[PseudomodeParams], spectrum) -> dict:
    """Hybridized-ground-state and Gibbs fidelities a cooling run is judged against."""
    payload = {
        "hybridized_fidelity": hybridized_reference(
            setup.h_s, setup.q, modes[0], setup.ground
        ).value,
    }
    temperature = t_eff(spectrum, setup.ground.e01)
    payload["t_eff_e01"] = temperature.value
    payload["t_eff_regime"] = temperature.regime
    if temperature.regime == "finite" and temperature.value > 0:
        gibbs = gibbs_reference(setup.h_s, setup.q, 1.0 / temperature.value, setup.ground)
        payload["gibbs_fidelity"] = gibbs.fidelity_full
        payload["gibbs_fidelity_connected"] = gibbs.fidelity_restricted
        payload["gibbs_connected_levels"] = len(gibbs.connected)
    return payload


def spectra_table(
    setup: Setup, modes: list[PseudomodeParams]
) -> tuple[list[str], list[list[float]]]:
    bath = setup.bath
    weight = lambda_bar_sq(setup.config)
    # an even point count keeps w = 0 off the grid
    ws = np.linspace(-SPECTRA_SPAN * bath.omega0, SPECTRA_SPAN * bath.omega0, SPECTRA_POINTS)
    columns = {"omega": ws, "S_target": np.asarray(power_spectrum(bath, ws))}
    columns["S_exact"] = np.asarray(exact_decomposition(bath, ws))
    for k, mode in enumerate(modes):
        columns[f"S_a{k + 1}"] = np.asarray(mode_spectrum(mode, weight, ws))
    columns["S_fit"] = np.asarray(s_fit(modes, weight, ws))
    columns["T_a1"] = t_eff_grid(lambda w: mode_spectrum(modes[0], 1.0, w), ws)
    columns["T_fit"] = t_eff_grid(lambda w: s_fit(modes, weight, w), ws)
    header = list(columns)
    rows = [[float(columns[name][k]) for name in header] for k in range(len(ws))]
    return header, rows


def bath_fit_payload(setup: Setup, fit: ExpFitResult, modes: list[PseudomodeParams]) -> dict:
    payload = fit_document(setup.bath, fit)
    payload["modes"] = [mode.as_dict() for mode in modes]
    payload["e01"] = setup.ground.e01
    payload["e_ground"] = setup.ground.e_ground
    return payload


def _observe_energy(setup: Setup, model: CompositeModel, physical: bool) -> float:
    cfg = setup.config
    rho0 = start_state(setup, model)
    energy = {"energy": setup.energy}
    if cfg.sweep.t_obs is None:
        final = steady_state(
            model,
            rho0,
            energy,
            tol=cfg.solver.steady_tol,
            t_cap=cfg.solver.steady_t_cap,
            step=cfg.solver.h,
        ).state
    else:
        final = evolve(model, rho0, [0.0, cfg.sweep.t_obs], step=cfg.solver.h).final_state
    if physical and final.hermiticity_defect() > PHYSICAL_HERMITICITY_TOL:
        raise DomainError(
            f"physical run lost Hermiticity (defect {final.hermiticity_defect():.3g})"
        )
    return setup.energy(reduced_system(model, final))


def sweep_sampler(setup: Setup, modes: list[PseudomodeParams]) -> Callable[[float], float]:
    base = build_model(setup, modes, MODEL_FULL)

    def sample(lambda_bar: float) -> float:
        return _observe_energy(setup, base.with_lambda_bar(lambda_bar), physical=True)

    return sample


def direct_reference(setup: Setup, modes: list[PseudomodeParams]) -> float:
    model = build_model(setup, modes, MODEL_FULL, lambda_bar=setup.config.modes.lambda_bar)
    return _observe_energy(setup, model, physical=model.physical)


def sweep_plan(cfg: RunConfig) -> SweepPlan:
    return SweepPlan(
        lambda_bar_values=tuple(cfg.sweep.lambda_bar_values),
        poly_order=cfg.sweep.poly_order,
    )


def run_extrapolation(
    setup: Setup, modes: list[PseudomodeParams], jobs: int = 1
) -> tuple[list[SweepSample], PolyModel, dict]:
    plan = sweep_plan(setup.config)
    samples = run_sweep(sweep_sampler(setup, modes), plan, jobs)
    model = fit_poly(samples, plan.poly_order)
    continued, defect = continue_to_imag(model)
    payload = model.as_dict()
    payload["continued_real"] = continued
    payload["imag_defect"] = defect
    if setup.config.sweep.direct_reference:
        direct = direct_reference(setup, modes)
        payload["direct_reference"] = direct
        payload["deviation"] = abs(continued - direct)
        log.info("Continued <H_s>=%.6g vs direct %.6g", continued, direct)
    return samples, model, payload


def run_error_table(cfg: RunConfig, jobs: int = 1) -> list[ErrorRow]:
    table = cfg.sweep.error_table
    cache: dict[int, tuple[Setup, list[PseudomodeParams]]] = {}

    def setup_for(n: int) -> tuple[Setup, list[PseudomodeParams]]:
        if n not in cache:
            setup = prepare(cfg, n_sites=n)
            cache[n] = (setup, fit_modes(setup)[1])
        return cache[n]

    return error_vs_nm(
        table.n_values,
        table.m_values,
        sampler_for=lambda n: sweep_sampler(*setup_for(n)),
        direct_for=lambda n: direct_reference(*setup_for(n)),
        lambda_bar_values=cfg.sweep.lambda_bar_values,
        jobs=jobs,
    )


def scan_frequencies(setup: Setup) -> list[float]:
    scan = setup.config.scan
    if scan.omega0_units == "e01":
        return [m * setup.ground.e01 for m in scan.omega0_grid]
    return list(scan.omega0_grid)


def run_scan(cfg: RunConfig, jobs: int = 1) -> list[tuple[float, Trajectory]]:
    base = prepare(cfg)
    scan = cfg.scan

    def run_point(omega0: float) -> tuple[float, Trajectory]:
        setup = prepare(cfg, omega0=omega0)
        _, modes = fit_modes(setup)
        return omega0, run_pseudomode(setup, modes, MODEL_FULL, scan.t_max, scan.n_times)

    omegas = scan_frequencies(base)
    log.info("Scanning %d bath frequencies with %d job(s)", len(omegas), jobs)
    return run_ordered(run_point, omegas, jobs)


def final_slice(results: list[tuple[float, Trajectory]]) -> tuple[float, float]:
    """Frequency with the highest final-time fidelity, and that fidelity."""
    best = max(results, key=lambda item: item[1].final("fidelity"))
    return best[0], best[1].final("fidelity")


def steady_fidelity(setup: Setup, modes: list[PseudomodeParams], kind: str) -> float:
    model = build_model(setup, modes, kind)
    solver = setup.config.solver
    result = steady_state(
        model,
        start_state(setup, model),
        setup.observables(),
        tol=solver.steady_tol,
        t_cap=solver.steady_t_cap,
        step=solver.h,
    )
    return result.values.get("fidelity", math.nan)
