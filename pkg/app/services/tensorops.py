from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import reduce
from math import prod

import numpy as np
from scipy import linalg

from app.services.errors import ArgumentError, DimensionError, HermiticityError

MAX_DENSE_DIM = 1024
HERMITICITY_RTOL = 1e-9
DEGENERACY_RTOL = 1e-9

PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}


@dataclass(frozen=True)
class SpaceLayout:
    factors: tuple[tuple[str, int], ...]

    def __post_init__(self):
        factors = tuple((str(label), int(dim)) for label, dim in self.factors)
        object.__setattr__(self, "factors", factors)
        if not factors:
            raise DimensionError("layout needs at least one factor")
        labels = [label for label, _ in factors]
        if len(set(labels)) != len(labels):
            raise DimensionError(f"duplicate factor labels in {labels}")
        for label, dim in factors:
            if dim < 2:
                raise DimensionError(f"factor {label!r} has dimension {dim}, need >= 2")
        if self.total_dim > MAX_DENSE_DIM:
            raise DimensionError(
                f"layout dimension {self.total_dim} exceeds dense limit {MAX_DENSE_DIM}"
            )

    def __len__(self) -> int:
        return len(self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(dim for _, dim in self.factors)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.factors)

    @property
    def total_dim(self) -> int:
        return prod(self.dims)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DimensionError(f"no factor labelled {label!r}") from None

    def subset(self, keep: Iterable[int]) -> SpaceLayout:
        return SpaceLayout(tuple(self.factors[k] for k in sorted(set(keep))))

    def concat(self, other: SpaceLayout) -> SpaceLayout:
        return SpaceLayout(self.factors + other.factors)


def spin_mode_layout(n_spins: int, truncations: Sequence[int] = ()) -> SpaceLayout:
    factors = [(f"s{k + 1}", 2) for k in range(n_spins)]
    factors += [(f"a{k + 1}", int(n)) for k, n in enumerate(truncations)]
    return SpaceLayout(tuple(factors))


@dataclass(frozen=True, eq=False)
class Op:
    layout: SpaceLayout
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=complex)
        dim = self.layout.total_dim
        if data.shape != (dim, dim):
            raise DimensionError(
                f"matrix shape {data.shape} does not match layout dimension {dim}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def dag(self) -> Op:
        return Op(self.layout, self.data.conj().T)

    def trace(self) -> complex:
        return complex(np.trace(self.data))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.data)))

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.data - self.data.conj().T)))

    def is_hermitian(self, rtol: float = HERMITICITY_RTOL) -> bool:
        return self.hermiticity_defect() <= rtol * max(self.max_abs(), 1e-300)

    def _peer(self, other: Op) -> np.ndarray:
        if not isinstance(other, Op):
            return NotImplemented
        if other.layout != self.layout:
            raise DimensionError(
                f"layout mismatch: {self.layout.factors} vs {other.layout.factors}"
            )
        return other.data

    def __add__(self, other: Op) -> Op:
        return Op(self.layout, self.data + self._peer(other))

    def __sub__(self, other: Op) -> Op:
        return Op(self.layout, self.data - self._peer(other))

    def __matmul__(self, other: Op) -> Op:
        return Op(self.layout, self.data @ self._peer(other))

    def __mul__(self, scalar: complex) -> Op:
        return Op(self.layout, self.data * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> Op:
        return Op(self.layout, -self.data)


@dataclass(frozen=True, eq=False)
class EigDecomp:
    values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        vectors = np.array(self.vectors, dtype=complex)
        values.setflags(write=False)
        vectors.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "vectors", vectors)

    def to_eigenbasis(self, matrix: np.ndarray) -> np.ndarray:
        return self.vectors.conj().T @ matrix @ self.vectors

    def from_eigenbasis(self, matrix: np.ndarray) -> np.ndarray:
        return self.vectors @ matrix @ self.vectors.conj().T


def identity(layout: SpaceLayout) -> Op:
    return Op(layout, np.eye(layout.total_dim, dtype=complex))


def embed(layout: SpaceLayout, local: np.ndarray, factor: int) -> Op:
    if not 0 <= factor < len(layout):
        raise DimensionError(f"factor {factor} out of range for {len(layout)} factors")
    local = np.asarray(local, dtype=complex)
    dim = layout.dims[factor]
    if local.shape != (dim, dim):
        raise DimensionError(
            f"local operator shape {local.shape} does not fit factor "
            f"{layout.labels[factor]!r} of dimension {dim}"
        )
    pieces = [
        local if k == factor else np.eye(d, dtype=complex)
        for k, d in enumerate(layout.dims)
    ]
    return Op(layout, reduce(np.kron, pieces))


def pauli(layout: SpaceLayout, site: int, axis: str) -> Op:
    if axis not in PAULI:
        raise ArgumentError(f"unknown Pauli axis {axis!r}")
    if not 0 <= site < len(layout):
        raise DimensionError(f"site {site} out of range for {len(layout)} factors")
    if layout.dims[site] != 2:
        raise DimensionError(
            f"factor {layout.labels[site]!r} has dimension {layout.dims[site]}, not a qubit"
        )
    return embed(layout, PAULI[axis], site)


def local_annihilation(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n)), k=1).astype(complex)


def annihilation(layout: SpaceLayout, mode: int) -> Op:
    if not 0 <= mode < len(layout):
        raise DimensionError(f"mode {mode} out of range for {len(layout)} factors")
    return embed(layout, local_annihilation(layout.dims[mode]), mode)


def tensor(*ops: Op) -> Op:
    layout = reduce(SpaceLayout.concat, (op.layout for op in ops))
    return Op(layout, reduce(np.kron, (op.data for op in ops)))


def fock_projector(n: int, occupation: int) -> np.ndarray:
    if not 0 <= occupation < n:
        raise DimensionError(f"occupation {occupation} outside truncation {n}")
    projector = np.zeros((n, n), dtype=complex)
    projector[occupation, occupation] = 1.0
    return projector


def commutator(a: Op, b: Op) -> Op:
    return a @ b - b @ a


def eig_hermitian(h: Op) -> EigDecomp:
    defect = h.hermiticity_defect()
    scale = max(h.max_abs(), 1e-300)
    if defect > HERMITICITY_RTOL * scale:
        raise HermiticityError(
            f"operator is not Hermitian (defect {defect:.3g}, scale {scale:.3g})",
            defect=defect,
        )
    values, vectors = linalg.eigh(0.5 * (h.data + h.data.conj().T))
    return EigDecomp(values, vectors)


def degeneracy_tolerance(values: np.ndarray) -> float:
    return DEGENERACY_RTOL * max(1.0, abs(float(values[0])))


def degenerate_groups(values: np.ndarray) -> list[list[int]]:
    tol = degeneracy_tolerance(values)
    groups: list[list[int]] = [[0]]
    for k in range(1, len(values)):
        if values[k] - values[groups[-1][0]] <= tol:
            groups[-1].append(k)
        else:
            groups.append([k])
    return groups


def partial_trace(rho: Op, keep: Iterable[int]) -> Op:
    keep = sorted(set(keep))
    if not keep:
        raise ArgumentError("partial trace needs at least one factor to keep")
    n = len(rho.layout)
    if keep[0] < 0 or keep[-1] >= n:
        raise DimensionError(f"keep set {keep} out of range for {n} factors")
    dims = rho.layout.dims
    tensor_form = rho.data.reshape(dims + dims)
    rows = list(range(n))
    cols = [k if k not in keep else n + k for k in range(n)]
    out = [k for k in keep] + [n + k for k in keep]
    reduced = np.einsum(tensor_form, rows + cols, out)
    sub = rho.layout.subset(keep)
    return Op(sub, reduced.reshape(sub.total_dim, sub.total_dim))


def expect(a: Op, rho: Op) -> complex:
    if a.layout.total_dim != rho.layout.total_dim or a.layout.dims != rho.layout.dims:
        raise DimensionError(
            f"expectation needs matching layouts: {a.layout.factors} vs {rho.layout.factors}"
        )
    return complex(np.einsum("ij,ji->", a.data, rho.data))
