from __future__ import annotations

import bisect
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np

from app.services.bathlib import PseudomodeParams, UnderdampedBath
from app.services.errors import ArgumentError, DegenerateSpectrumError, DomainError
from app.services.tensorops import (
    EigDecomp,
    Op,
    SpaceLayout,
    annihilation,
    degenerate_groups,
    eig_hermitian,
    identity,
    pauli,
    spin_mode_layout,
)

DEFAULT_Q_COEFFS = (1.0, 1.1, 0.9)
# a level joins the ground manifold while its offset from E_G stays below this
# fraction of the gap to the next level
GROUND_GAP_RATIO = 0.05


@dataclass(frozen=True)
class IsingSpec:
    n_sites: int
    g: float = 1.0
    j: float = 5.0
    q_coeffs: tuple[float, float, float] = DEFAULT_Q_COEFFS

    def __post_init__(self):
        if self.n_sites < 2:
            raise ArgumentError(f"Ising chain needs at least 2 sites, got {self.n_sites}")
        if self.g <= 0:
            raise ArgumentError(f"transverse field g must be positive, got {self.g}")
        coeffs = tuple(float(c) for c in self.q_coeffs)
        if len(coeffs) != 3:
            raise ArgumentError(f"q_coeffs needs three entries, got {len(coeffs)}")
        object.__setattr__(self, "q_coeffs", coeffs)

    @property
    def layout(self) -> SpaceLayout:
        return spin_mode_layout(self.n_sites)


def build_ising(spec: IsingSpec) -> Op:
    layout = spec.layout
    terms = [spec.g * pauli(layout, k, "z") for k in range(spec.n_sites)]
    terms += [
        -spec.j * (pauli(layout, k, "x") @ pauli(layout, k + 1, "x"))
        for k in range(spec.n_sites - 1)
    ]
    return reduce(Op.__add__, terms)


def build_q(spec: IsingSpec) -> Op:
    layout = spec.layout
    last = spec.n_sites - 1
    cx, cy, cz = spec.q_coeffs
    return (
        cx * pauli(layout, last, "x")
        + cy * pauli(layout, last, "y")
        + cz * pauli(layout, last, "z")
    )


@dataclass(frozen=True, eq=False)
class GroundInfo:
    e_ground: float
    e01: float
    projector: Op
    degeneracy: int
    eig: EigDecomp


def ground_info(h_s: Op, gap_ratio: float = GROUND_GAP_RATIO) -> GroundInfo:
    eig = eig_hermitian(h_s)
    values = eig.values
    groups = degenerate_groups(values)
    if len(groups) == 1:
        raise DegenerateSpectrumError(
            f"spectrum is fully degenerate at E={values[0]:.6g}; no gap to prepare against"
        )
    e0 = float(values[0])
    n_ground = 1
    # quasi-degenerate low levels (tunnel-split doublets) count as ground manifold
    while n_ground < len(groups) - 1:
        offset = values[groups[n_ground][0]] - e0
        next_gap = values[groups[n_ground + 1][0]] - e0
        if offset > gap_ratio * next_gap:
            break
        n_ground += 1
    ground_idx = [k for group in groups[:n_ground] for k in group]
    vectors = eig.vectors[:, ground_idx]
    projector = Op(h_s.layout, vectors @ vectors.conj().T)
    e01 = float(values[groups[n_ground][0]]) - e0
    return GroundInfo(
        e_ground=e0,
        e01=e01,
        projector=projector,
        degeneracy=len(ground_idx),
        eig=eig,
    )


@dataclass(frozen=True)
class CouplingSchedule:
    segments: tuple[tuple[float, float], ...] = ((0.0, 1.0),)

    def __post_init__(self):
        segments = tuple((float(t), float(s)) for t, s in self.segments)
        if not segments:
            raise ArgumentError("coupling schedule needs at least one segment")
        if segments[0][0] != 0.0:
            raise ArgumentError(f"first schedule segment must start at t=0, got {segments[0][0]}")
        starts = [t for t, _ in segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ArgumentError(f"schedule start times must be strictly increasing: {starts}")
        if any(s < 0 for _, s in segments):
            raise ArgumentError("schedule scales must be non-negative")
        object.__setattr__(self, "segments", segments)

    @property
    def starts(self) -> list[float]:
        return [t for t, _ in self.segments]

    @property
    def max_scale(self) -> float:
        return max(s for _, s in self.segments)

    def segment_index(self, t: float) -> int:
        if t < 0:
            raise DomainError(f"schedule is defined for t >= 0, got {t}")
        return bisect.bisect_right(self.starts, t) - 1

    def scale_at(self, t: float) -> float:
        return self.segments[self.segment_index(t)][1]

    def switch_times(self, t_start: float, t_end: float) -> list[float]:
        return [t for t in self.starts[1:] if t_start < t < t_end]

    def as_dict(self) -> dict:
        return {"segments": [[t, s] for t, s in self.segments]}


def coupling_at(schedule: CouplingSchedule, t: float) -> float:
    return schedule.scale_at(t)


def mode_layout(modes: Sequence[PseudomodeParams]) -> SpaceLayout:
    return SpaceLayout(tuple((f"a{k + 1}", mode.truncation) for k, mode in enumerate(modes)))


@dataclass(frozen=True, eq=False)
class CompositeModel:
    """System (x) pseudomodes, stored factor by factor.

    The coupling is Q (x) X with X = sum_j lambda_bar^p_j lam_j (a_j + a_j^dag);
    only the mode factor carries lambda_bar, so X is complex symmetric at
    lambda_bar = i and the full Hamiltonian is not Hermitian.
    """

    system_layout: SpaceLayout
    modes_layout: SpaceLayout
    h_system: np.ndarray
    h_modes: np.ndarray
    q: np.ndarray
    x_modes: np.ndarray
    collapses: tuple[tuple[float, np.ndarray], ...]
    modes: tuple[PseudomodeParams, ...]
    lambda_bar: complex
    schedule: CouplingSchedule = field(default_factory=CouplingSchedule)
    g: float = 1.0

    @property
    def layout(self) -> SpaceLayout:
        return self.system_layout.concat(self.modes_layout)

    @property
    def dims(self) -> tuple[int, int]:
        return self.system_layout.total_dim, self.modes_layout.total_dim

    @property
    def physical(self) -> bool:
        return complex(self.lambda_bar).imag == 0

    def hamiltonian(self, scale: float = 1.0) -> Op:
        ds, dm = self.dims
        data = (
            np.kron(self.h_system, np.eye(dm))
            + np.kron(np.eye(ds), self.h_modes)
            + scale * np.kron(self.q, self.x_modes)
        )
        return Op(self.layout, data)

    def hamiltonian_at(self, t: float) -> Op:
        return self.hamiltonian(self.schedule.scale_at(t))

    @property
    def h_total(self) -> Op:
        return self.hamiltonian(1.0)

    def collapse_ops(self) -> list[tuple[float, Op]]:
        ds, _ = self.dims
        return [
            (rate, Op(self.layout, np.kron(np.eye(ds), op))) for rate, op in self.collapses
        ]

    def system_hamiltonian(self) -> Op:
        return Op(self.system_layout, self.h_system)

    def coupling_operator(self) -> Op:
        return Op(self.system_layout, self.q)

    def with_lambda_bar(self, lambda_bar: complex) -> CompositeModel:
        return replace(
            self,
            lambda_bar=complex(lambda_bar),
            x_modes=_mode_coupling(self.modes, self.modes_layout, complex(lambda_bar)),
        )


def _mode_coupling(
    modes: Sequence[PseudomodeParams], layout: SpaceLayout, lambda_bar: complex
) -> np.ndarray:
    x = np.zeros((layout.total_dim, layout.total_dim), dtype=complex)
    for k, mode in enumerate(modes):
        a = annihilation(layout, k).data
        x += lambda_bar**mode.lambda_bar_power * mode.lam * (a + a.conj().T)
    return x


def compose(
    h_s: Op,
    q: Op,
    modes: Sequence[PseudomodeParams],
    lambda_bar: complex = 1.0,
    schedule: CouplingSchedule | None = None,
    g: float = 1.0,
) -> CompositeModel:
    modes = tuple(modes)
    if not modes:
        raise ArgumentError("a composite model needs at least one pseudomode")
    if q.layout != h_s.layout:
        raise ArgumentError("coupling operator and system Hamiltonian live on different spaces")
    layout = mode_layout(modes)
    # concatenation validates the total dimension
    h_s.layout.concat(layout)

    h_modes = np.zeros((layout.total_dim, layout.total_dim), dtype=complex)
    collapses = []
    for k, mode in enumerate(modes):
        a = annihilation(layout, k).data
        h_modes += mode.omega * (a.conj().T @ a)
        collapses.append((mode.lindblad_rate, a))

    return CompositeModel(
        system_layout=h_s.layout,
        modes_layout=layout,
        h_system=h_s.data,
        h_modes=h_modes,
        q=q.data,
        x_modes=_mode_coupling(modes, layout, complex(lambda_bar)),
        collapses=tuple(collapses),
        modes=modes,
        lambda_bar=complex(lambda_bar),
        schedule=schedule or CouplingSchedule(),
        g=g,
    )


def assemble(
    spec: IsingSpec,
    modes: Sequence[PseudomodeParams],
    lambda_bar: complex,
    schedule: CouplingSchedule | None = None,
) -> CompositeModel:
    return compose(build_ising(spec), build_q(spec), modes, lambda_bar, schedule, g=spec.g)


def single_mode_model(
    spec: IsingSpec,
    modes: Sequence[PseudomodeParams],
    schedule: CouplingSchedule | None = None,
) -> CompositeModel:
    if not modes:
        raise ArgumentError("single-mode baseline needs the resonant pseudomode")
    return assemble(spec, modes[:1], 1.0, schedule)


def parity_operator(model: CompositeModel) -> Op:
    """Spin parity prod sigma_z times the parity of the total mode occupation."""
    spins = identity(model.system_layout)
    for site in range(len(model.system_layout)):
        spins = spins @ pauli(model.system_layout, site, "z")
    occupation = reduce(
        Op.__add__,
        (
            annihilation(model.modes_layout, k).dag() @ annihilation(model.modes_layout, k)
            for k in range(len(model.modes))
        ),
    )
    counts = np.rint(np.real(np.diag(occupation.data)))
    mode_parity = np.diag((-1.0) ** counts)
    return Op(model.layout, np.kron(spins.data, mode_parity))


@dataclass(frozen=True)
class BathRecipe:
    """How a bath is derived from the system: absolute or gap-relative frequencies."""

    omega0: float | None = None
    omega0_e01_multiple: float | None = 1.2
    gamma: float | None = 3.8
    gamma_omega0_multiple: float | None = None
    lambda_prefactor: float = 1.15
    beta: float = math.inf

    def __post_init__(self):
        if (self.omega0 is None) == (self.omega0_e01_multiple is None):
            raise ArgumentError("give exactly one of omega0 or omega0_e01_multiple")
        if (self.gamma is None) == (self.gamma_omega0_multiple is None):
            raise ArgumentError("give exactly one of gamma or gamma_omega0_multiple")
        if self.lambda_prefactor <= 0:
            raise ArgumentError("lambda_prefactor must be positive")

    def resolve(self, g: float, e01: float) -> UnderdampedBath:
        if self.omega0 is not None:
            omega0 = self.omega0
        else:
            omega0 = self.omega0_e01_multiple * e01
        if self.gamma is not None:
            gamma = self.gamma
        else:
            gamma = self.gamma_omega0_multiple * omega0
        if omega0 <= gamma / 2:
            raise ArgumentError(
                f"resolved omega0={omega0:.6g} is not above gamma/2={gamma / 2:.6g}"
            )
        big_omega = math.sqrt(omega0**2 - gamma**2 / 4)
        return UnderdampedBath(
            lam=self.lambda_prefactor * g * math.sqrt(big_omega),
            gamma=gamma,
            omega0=omega0,
            beta=self.beta,
        )

    def with_omega0(self, omega0: float) -> BathRecipe:
        return replace(self, omega0=omega0, omega0_e01_multiple=None)
