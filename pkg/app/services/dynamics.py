from __future__ import annotations

import logging
import math
from collections import deque
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from app.services.bathlib import PseudomodeParams
from app.services.errors import ArgumentError, DimensionError, IntegrationError
from app.services.modelkit import CompositeModel, GroundInfo, compose
from app.services.tensorops import (
    EigDecomp,
    Op,
    SpaceLayout,
    degenerate_groups,
    degeneracy_tolerance,
    eig_hermitian,
    expect,
    partial_trace,
)

log = logging.getLogger(__name__)

TRACE_TOL = 1e-6
STATE_HERMITICITY_TOL = 1e-6
MAX_STEP_G = 0.05
STEP_FRACTION = 0.2
STEADY_CHUNK = 5.0
STEADY_TOL = 1e-6
STEADY_T_CAP = 500.0
GIBBS_WEIGHT_THRESHOLD = 1e-12
ORACLE_MAX_DIM = 64

MAXIMALLY_MIXED = "maximally_mixed"
ALL_UP = "all_up"
RANDOM_PURE = "random_pure"
INITIAL_STATES = (MAXIMALLY_MIXED, ALL_UP, RANDOM_PURE)

PRIMARY_SERIES = ("energy_error", "fidelity")

Observable = Callable[[Op], float]


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    series: dict[str, np.ndarray]
    trace_dev: np.ndarray
    herm_dev: np.ndarray
    final_state: Op | None = None
    step: float | None = None

    def __post_init__(self):
        n = len(self.times)
        lengths = [len(values) for values in self.series.values()]
        lengths += [len(self.trace_dev), len(self.herm_dev)]
        if any(length != n for length in lengths):
            raise DimensionError(f"trajectory arrays must all have {n} entries, got {lengths}")

    def final(self, name: str) -> float:
        return float(self.series[name][-1])

    def at(self, name: str, t: float) -> float:
        k = int(np.argmin(np.abs(self.times - t)))
        return float(self.series[name][k])

    def columns(self) -> list[str]:
        primary = [name for name in PRIMARY_SERIES if name in self.series]
        extras = [name for name in self.series if name not in PRIMARY_SERIES]
        return ["time", *primary, "trace_dev", "herm_dev", *extras]

    def rows(self) -> list[list[float]]:
        columns = {
            "time": self.times,
            "trace_dev": self.trace_dev,
            "herm_dev": self.herm_dev,
            **self.series,
        }
        names = self.columns()
        return [[float(columns[name][k]) for name in names] for k in range(len(self.times))]


@dataclass(frozen=True)
class FidelityResult:
    value: float
    clipped: float = 0.0
    symmetrized: bool = False


@dataclass(frozen=True, eq=False)
class SteadyState:
    state: Op
    time: float
    converged: bool
    drift: float
    values: dict[str, float] = field(default_factory=dict)


class _PseudoLindbladKernel:
    """Applies the generator factor by factor on a (system x modes) density matrix.

    The same Hamiltonian multiplies from both sides; the anticommutator part of
    every damping term is folded into the effective left/right mode operators.
    Every mode operator acting from the left is stacked into one product, and
    the system factor on each side is a single product against [H_s, Q].
    """

    def __init__(self, model: CompositeModel, scale: float):
        self.ds, self.dm = model.dims
        self.dim = self.ds * self.dm
        damping = np.zeros_like(model.h_modes)
        for rate, a in model.collapses:
            damping = damping + rate * (a.conj().T @ a)
        self.coupled = scale != 0
        self.x = model.x_modes
        self.right_modes = model.h_modes + 0.5j * damping
        left_ops = [model.h_modes - 0.5j * damping]
        if self.coupled:
            left_ops.append(model.x_modes)
            self.sys_left = np.hstack((model.h_system, scale * model.q))
            self.sys_right = np.vstack((model.h_system, scale * model.q))
        else:
            self.sys_left = self.sys_right = model.h_system
        self.first_jump = len(left_ops)
        left_ops += [a for _, a in model.collapses]
        self.left_stack = np.concatenate(left_ops)
        self.jumps = [(rate, np.ascontiguousarray(a.conj().T)) for rate, a in model.collapses]

    def apply(self, rho: np.ndarray) -> np.ndarray:
        ds, dm, dim = self.ds, self.dm, self.dim
        rows = rho.reshape(ds, dm, dim)
        # blocks[k][m, i, c] = (B_k applied to the mode index of row (i, m)) rho
        blocks = np.tensordot(self.left_stack, rows, axes=(1, 1)).reshape(-1, dm, ds, dim)
        modes_first = -1j * blocks[0]
        for k, (rate, a_dag) in enumerate(self.jumps, start=self.first_jump):
            modes_first += rate * (blocks[k].reshape(-1, dm) @ a_dag).reshape(dm, ds, dim)
        out = modes_first.transpose(1, 0, 2).reshape(dim, dim)

        left_in = rows
        if self.coupled:
            left_in = np.concatenate((rows, blocks[1].transpose(1, 0, 2)))
        out -= 1j * (self.sys_left @ left_in.reshape(len(left_in), -1)).reshape(dim, dim)

        flat = rho.reshape(-1, dm)
        out += 1j * (flat @ self.right_modes).reshape(dim, dim)
        cols = rho.reshape(dim, ds, dm)
        if self.coupled:
            cols = np.concatenate((cols, (flat @ self.x).reshape(dim, ds, dm)), axis=1)
        right_sys = np.tensordot(cols, self.sys_right, axes=(1, 0))
        out += 1j * right_sys.transpose(0, 2, 1).reshape(dim, dim)
        return out


def _rk4(apply: Callable[[np.ndarray], np.ndarray], rho: np.ndarray, h: float, n_steps: int):
    for _ in range(n_steps):
        k1 = apply(rho)
        k2 = apply(rho + 0.5 * h * k1)
        k3 = apply(rho + 0.5 * h * k2)
        k4 = apply(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return rho


def _substeps(span: float, h: float) -> tuple[int, float]:
    n_steps = max(1, math.ceil(span / h - 1e-9))
    return n_steps, span / n_steps


def _check_layout(model: CompositeModel, rho: Op) -> None:
    if rho.layout != model.layout:
        raise DimensionError(
            f"state layout {rho.layout.factors} does not match model layout {model.layout.factors}"
        )


def _check_grid(t_grid: Sequence[float]) -> np.ndarray:
    times = np.asarray(t_grid, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ArgumentError("time grid must be a non-empty 1-D sequence")
    if times[0] < 0:
        raise ArgumentError(f"time grid must start at t >= 0, got {times[0]}")
    if np.any(np.diff(times) <= 0):
        raise ArgumentError("time grid must be strictly increasing")
    return times


def generator_apply(model: CompositeModel, t: float, rho: Op) -> Op:
    _check_layout(model, rho)
    kernel = _PseudoLindbladKernel(model, model.schedule.scale_at(t))
    return Op(model.layout, kernel.apply(rho.data))


def _max_row_sum(matrix: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(matrix), axis=1)))


def default_step(model: CompositeModel) -> float:
    norm = max(
        _max_row_sum(model.hamiltonian(scale).data)
        for scale in {s for _, s in model.schedule.segments}
    )
    return min(MAX_STEP_G / model.g, STEP_FRACTION / max(norm, 1e-300))


def reduced_system(model: CompositeModel, rho: Op | np.ndarray) -> Op:
    if not isinstance(rho, Op):
        rho = Op(model.layout, rho)
    return partial_trace(rho, range(len(model.system_layout)))


class _Propagator:
    def __init__(self, model: CompositeModel, step: float, trace_tol: float):
        self.model = model
        self.step = step
        self.trace_tol = trace_tol
        self._kernels: dict[float, _PseudoLindbladKernel] = {}

    def _kernel(self, t: float) -> _PseudoLindbladKernel:
        scale = self.model.schedule.scale_at(t)
        if scale not in self._kernels:
            self._kernels[scale] = _PseudoLindbladKernel(self.model, scale)
        return self._kernels[scale]

    def advance(self, rho: np.ndarray, t0: float, t1: float) -> np.ndarray:
        edges = [t0, *self.model.schedule.switch_times(t0, t1), t1]
        for start, end in zip(edges, edges[1:]):
            n_steps, h = _substeps(end - start, self.step)
            rho = _rk4(self._kernel(start).apply, rho, h, n_steps)
        trace_dev = abs(np.trace(rho) - 1.0)
        if not np.all(np.isfinite(rho)) or trace_dev > self.trace_tol:
            raise IntegrationError(
                f"trace deviation {trace_dev:.3g} at t={t1:.6g} exceeds {self.trace_tol:g}; "
                f"reduce the step size (h={self.step:.4g})",
                time=t1,
                trace_deviation=float(trace_dev),
            )
        return rho


def _measure(
    rho_s: Op, observables: Mapping[str, Observable]
) -> dict[str, float]:
    return {name: float(fn(rho_s)) for name, fn in observables.items()}


def evolve(
    model: CompositeModel,
    rho0: Op,
    t_grid: Sequence[float],
    observables: Mapping[str, Observable] | None = None,
    step: float | None = None,
    trace_tol: float = TRACE_TOL,
) -> Trajectory:
    _check_layout(model, rho0)
    times = _check_grid(t_grid)
    observables = observables or {}
    h = step if step is not None else default_step(model)
    if h <= 0:
        raise ArgumentError(f"step size must be positive, got {h}")
    log.info(
        "Evolving %d-mode model (dim %d, lambda_bar=%s) to t=%.4g with step %.4g",
        len(model.modes),
        model.layout.total_dim,
        model.lambda_bar,
        times[-1],
        h,
    )
    propagator = _Propagator(model, h, trace_tol)
    rho = np.array(rho0.data)
    series = {name: np.empty(len(times)) for name in observables}
    trace_dev = np.empty(len(times))
    herm_dev = np.empty(len(times))
    for k, t in enumerate(times):
        if k:
            rho = propagator.advance(rho, times[k - 1], t)
        rho_s = reduced_system(model, rho)
        trace_dev[k] = abs(np.trace(rho) - 1.0)
        herm_dev[k] = rho_s.hermiticity_defect()
        for name, value in _measure(rho_s, observables).items():
            series[name][k] = value
    return Trajectory(
        times=times,
        series=series,
        trace_dev=trace_dev,
        herm_dev=herm_dev,
        final_state=Op(model.layout, rho),
        step=h,
    )


def steady_state(
    model: CompositeModel,
    rho0: Op,
    observables: Mapping[str, Observable] | None = None,
    tol: float = STEADY_TOL,
    t_cap: float = STEADY_T_CAP,
    chunk: float = STEADY_CHUNK,
    step: float | None = None,
) -> SteadyState:
    _check_layout(model, rho0)
    if tol <= 0:
        raise ArgumentError(f"steady-state tolerance must be positive, got {tol}")
    observables = observables or {}
    h = step if step is not None else default_step(model)
    propagator = _Propagator(model, h, TRACE_TOL)

    def snapshot(rho: np.ndarray) -> tuple[np.ndarray, dict[str, float]]:
        values = _measure(reduced_system(model, rho), observables)
        if values:
            return np.array(list(values.values())), values
        # without observables the drift is measured on the full state
        return rho.ravel(), values

    rho = np.array(rho0.data)
    t = 0.0
    previous, values = snapshot(rho)
    drift = math.inf
    while t < t_cap:
        t_next = min(t + chunk, t_cap)
        rho = propagator.advance(rho, t, t_next)
        current, values = snapshot(rho)
        drift = float(np.max(np.abs(current - previous))) / (t_next - t)
        log.debug("Steady-state drift %.3e per unit time at t=%.4g", drift, t_next)
        t, previous = t_next, current
        if drift < tol:
            log.info("Steady state reached at t=%.4g (drift %.3e)", t, drift)
            return SteadyState(Op(model.layout, rho), t, True, drift, values)
    log.warning(
        "Steady state not reached by t_cap=%.4g (drift %.3e > tol %.3e)", t_cap, drift, tol
    )
    return SteadyState(Op(model.layout, rho), t, False, drift, values)


def system_state(layout: SpaceLayout, kind: str = MAXIMALLY_MIXED, seed: int | None = None) -> Op:
    dim = layout.total_dim
    if kind == MAXIMALLY_MIXED:
        return Op(layout, np.eye(dim) / dim)
    if kind == ALL_UP:
        psi = np.zeros(dim, dtype=complex)
        psi[0] = 1.0
    elif kind == RANDOM_PURE:
        rng = np.random.default_rng(seed)
        psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
        psi /= np.linalg.norm(psi)
    else:
        raise ArgumentError(f"unknown initial state {kind!r}; choose one of {INITIAL_STATES}")
    return Op(layout, np.outer(psi, psi.conj()))


def initial_state(model: CompositeModel, kind: str = MAXIMALLY_MIXED, seed: int | None = None) -> Op:
    rho_s = system_state(model.system_layout, kind, seed)
    _, dm = model.dims
    vacuum = np.zeros((dm, dm), dtype=complex)
    vacuum[0, 0] = 1.0
    return Op(model.layout, np.kron(rho_s.data, vacuum))


def fidelity_subspace(rho_s: Op, ground: GroundInfo) -> FidelityResult:
    if rho_s.layout != ground.projector.layout:
        raise DimensionError("state and ground projector live on different spaces")
    symmetrized = False
    if rho_s.hermiticity_defect() > STATE_HERMITICITY_TOL:
        log.warning(
            "Reduced state Hermiticity defect %.3g above %.0e; symmetrizing before fidelity",
            rho_s.hermiticity_defect(),
            STATE_HERMITICITY_TOL,
        )
        rho_s = 0.5 * (rho_s + rho_s.dag())
        symmetrized = True
    raw = expect(ground.projector, rho_s).real
    value = min(max(raw, 0.0), 1.0)
    clipped = abs(raw - value)
    if clipped > STATE_HERMITICITY_TOL:
        log.warning("Fidelity %.6g clipped into [0, 1]", raw)
    return FidelityResult(value=value, clipped=clipped, symmetrized=symmetrized)


def energy_error_observable(h_s: Op, e_ground: float, g: float = 1.0) -> Observable:
    def observable(rho_s: Op) -> float:
        return (expect(h_s, rho_s).real - e_ground) / g

    return observable


def fidelity_observable(ground: GroundInfo) -> Observable:
    def observable(rho_s: Op) -> float:
        return fidelity_subspace(rho_s, ground).value

    return observable


def standard_observables(h_s: Op, ground: GroundInfo, g: float = 1.0) -> dict[str, Observable]:
    return {
        "energy_error": energy_error_observable(h_s, ground.e_ground, g),
        "fidelity": fidelity_observable(ground),
    }


@dataclass(frozen=True)
class Transition:
    lower: int
    upper: int
    gap: float
    weight: float
    down_rate: float
    up_rate: float


@dataclass(frozen=True, eq=False)
class BMSGenerator:
    eig: EigDecomp
    layout: SpaceLayout
    transitions: tuple[Transition, ...]
    clipped_rate: float = 0.0

    def rate_matrix(self) -> np.ndarray:
        """W[i, j] is the total rate from eigenstate j into eigenstate i."""
        n = len(self.eig.values)
        rates = np.zeros((n, n))
        for tr in self.transitions:
            rates[tr.lower, tr.upper] += tr.weight * tr.down_rate
            rates[tr.upper, tr.lower] += tr.weight * tr.up_rate
        return rates

    def to_eigenbasis(self, rho_s: Op) -> np.ndarray:
        return self.eig.to_eigenbasis(rho_s.data)

    def from_eigenbasis(self, matrix: np.ndarray) -> Op:
        return Op(self.layout, self.eig.from_eigenbasis(matrix))


def bms_build(eig: EigDecomp, q: Op, spectrum: Callable[[float], float]) -> BMSGenerator:
    values = eig.values
    weights = np.abs(eig.to_eigenbasis(q.data)) ** 2
    tol = degeneracy_tolerance(values)
    transitions = []
    clipped = 0.0
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            gap = float(values[j] - values[i])
            # zero-frequency terms inside a degenerate level are neglected
            if gap <= tol:
                continue
            down = float(spectrum(gap))
            up = float(spectrum(-gap))
            clipped += max(-down, 0.0) + max(-up, 0.0)
            transitions.append(
                Transition(
                    lower=i,
                    upper=j,
                    gap=gap,
                    weight=float(weights[i, j]),
                    down_rate=max(down, 0.0),
                    up_rate=max(up, 0.0),
                )
            )
    if clipped > 0:
        log.warning("Clipped negative spectrum values summing to %.3g to zero rates", clipped)
    return BMSGenerator(eig=eig, layout=q.layout, transitions=tuple(transitions), clipped_rate=clipped)


class _BMSKernel:
    def __init__(self, genr: BMSGenerator):
        energies = genr.eig.values
        self.rates = genr.rate_matrix()
        outflow = self.rates.sum(axis=0)
        self.coeffs = -1j * (energies[:, None] - energies[None, :]) - 0.5 * (
            outflow[:, None] + outflow[None, :]
        )
        self.diag = np.diag_indices(len(energies))

    def apply(self, r: np.ndarray) -> np.ndarray:
        out = self.coeffs * r
        out[self.diag] += self.rates @ np.diagonal(r)
        return out


def bms_evolve(
    genr: BMSGenerator,
    rho_s0: Op,
    t_grid: Sequence[float],
    observables: Mapping[str, Observable] | None = None,
    g: float = 1.0,
    step: float | None = None,
    trace_tol: float = TRACE_TOL,
) -> Trajectory:
    if rho_s0.layout != genr.layout:
        raise DimensionError("initial state does not live on the system space")
    times = _check_grid(t_grid)
    observables = observables or {}
    kernel = _BMSKernel(genr)
    h = step if step is not None else min(
        MAX_STEP_G / g, STEP_FRACTION / max(float(np.max(np.abs(kernel.coeffs))), 1e-300)
    )
    log.info("Evolving secular master equation to t=%.4g with step %.4g", times[-1], h)
    r = genr.to_eigenbasis(rho_s0)
    series = {name: np.empty(len(times)) for name in observables}
    trace_dev = np.empty(len(times))
    herm_dev = np.empty(len(times))
    for k, t in enumerate(times):
        if k:
            n_steps, hh = _substeps(t - times[k - 1], h)
            r = _rk4(kernel.apply, r, hh, n_steps)
        rho_s = genr.from_eigenbasis(r)
        trace_dev[k] = abs(rho_s.trace() - 1.0)
        if not np.all(np.isfinite(r)) or trace_dev[k] > trace_tol:
            raise IntegrationError(
                f"trace deviation {trace_dev[k]:.3g} at t={t:.6g}; reduce the step size (h={h:.4g})",
                time=float(t),
                trace_deviation=float(trace_dev[k]),
            )
        herm_dev[k] = rho_s.hermiticity_defect()
        for name, value in _measure(rho_s, observables).items():
            series[name][k] = value
    return Trajectory(
        times=times,
        series=series,
        trace_dev=trace_dev,
        herm_dev=herm_dev,
        final_state=genr.from_eigenbasis(r),
        step=h,
    )


def bms_stationary(genr: BMSGenerator) -> Op:
    rates = genr.rate_matrix()
    populations = rates - np.diag(rates.sum(axis=0))
    kernel = linalg.null_space(populations)
    if kernel.shape[1] != 1:
        raise ArgumentError(
            f"stationary populations are not unique ({kernel.shape[1]} solutions); "
            "the transition graph is disconnected"
        )
    p = np.real(kernel[:, 0])
    p = p / p.sum()
    return genr.from_eigenbasis(np.diag(p))


def _thermal_weights(values: np.ndarray, beta: float) -> np.ndarray:
    if not (beta > 0 and math.isfinite(beta)):
        raise ArgumentError(f"Gibbs state needs finite beta > 0, got {beta}")
    return np.exp(-beta * (values - values[0]))


def gibbs_state(h_s: Op, beta: float) -> Op:
    eig = eig_hermitian(h_s)
    weights = _thermal_weights(eig.values, beta)
    return Op(h_s.layout, eig.from_eigenbasis(np.diag(weights / weights.sum())))


def connected_levels(
    eig: EigDecomp, q: Op, seeds: Sequence[int], threshold: float = GIBBS_WEIGHT_THRESHOLD
) -> list[int]:
    weights = np.abs(eig.to_eigenbasis(q.data)) ** 2
    seen = set(seeds)
    queue = deque(seeds)
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(weights[i] > threshold):
            j = int(j)
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return sorted(seen)


@dataclass(frozen=True, eq=False)
class GibbsReference:
    beta: float
    full: Op
    restricted: Op
    connected: tuple[int, ...]
    fidelity_full: float
    fidelity_restricted: float


def gibbs_reference(
    h_s: Op,
    q: Op,
    beta: float,
    ground: GroundInfo,
    threshold: float = GIBBS_WEIGHT_THRESHOLD,
) -> GibbsReference:
    eig = ground.eig
    weights = _thermal_weights(eig.values, beta)
    connected = connected_levels(eig, q, range(ground.degeneracy), threshold)
    mask = np.zeros(len(weights))
    mask[connected] = 1.0
    restricted_weights = weights * mask
    full = Op(h_s.layout, eig.from_eigenbasis(np.diag(weights / weights.sum())))
    restricted = Op(
        h_s.layout, eig.from_eigenbasis(np.diag(restricted_weights / restricted_weights.sum()))
    )
    return GibbsReference(
        beta=beta,
        full=full,
        restricted=restricted,
        connected=tuple(connected),
        fidelity_full=fidelity_subspace(full, ground).value,
        fidelity_restricted=fidelity_subspace(restricted, ground).value,
    )


def hybridized_reference(
    h_s: Op, q: Op, mode: PseudomodeParams, ground: GroundInfo
) -> FidelityResult:
    model = compose(h_s, q, [mode], lambda_bar=1.0)
    eig = eig_hermitian(model.h_total)
    lowest = degenerate_groups(eig.values)[0]
    vectors = eig.vectors[:, lowest]
    rho = Op(model.layout, vectors @ vectors.conj().T / len(lowest))
    return fidelity_subspace(reduced_system(model, rho), ground)


def trace_distance(a: Op, b: Op) -> float:
    diff = a - b
    values = linalg.eigvalsh(0.5 * (diff.data + diff.data.conj().T))
    return 0.5 * float(np.sum(np.abs(values)))


def vectorized_generator(model: CompositeModel, t: float = 0.0) -> np.ndarray:
    """Dense generator acting on row-major vec(rho); vec(A rho B) = (A (x) B^T) vec(rho)."""
    dim = model.layout.total_dim
    if dim > ORACLE_MAX_DIM:
        raise DimensionError(f"vectorized generator limited to dim <= {ORACLE_MAX_DIM}, got {dim}")
    h = model.hamiltonian_at(t).data
    collapses = [(rate, c.data) for rate, c in model.collapse_ops()]
    damping = sum((rate * (c.conj().T @ c) for rate, c in collapses), np.zeros_like(h))
    eye = np.eye(dim)
    generator = -1j * np.kron(h - 0.5j * damping, eye) + 1j * np.kron(
        eye, (h + 0.5j * damping).T
    )
    for rate, c in collapses:
        generator += rate * np.kron(c, c.conj())
    return generator


def null_space_steady_state(model: CompositeModel) -> Op:
    dim = model.layout.total_dim
    kernel = linalg.null_space(vectorized_generator(model))
    if kernel.shape[1] != 1:
        raise ArgumentError(f"generator has a {kernel.shape[1]}-dimensional null space")
    rho = kernel[:, 0].reshape(dim, dim)
    return Op(model.layout, rho / np.trace(rho))
