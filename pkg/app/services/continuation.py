from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from app.jobs.pool import run_ordered
from app.services.errors import ArgumentError, FitError, SimulationError, SweepError

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 9
DEFAULT_POLY_ORDER = 6
RANK_RTOL = 1e-12

SampleFn = Callable[[float], float]


def _default_values() -> tuple[float, ...]:
    return tuple(float(x) for x in np.linspace(0.0, 1.0, DEFAULT_SAMPLES))


@dataclass(frozen=True)
class SweepPlan:
    lambda_bar_values: tuple[float, ...] = field(default_factory=_default_values)
    poly_order: int = DEFAULT_POLY_ORDER
    observable: str = "energy"

    def __post_init__(self):
        values = []
        for value in self.lambda_bar_values:
            if isinstance(value, complex) and value.imag != 0:
                raise ArgumentError(f"sweep values must be real, got {value}")
            values.append(float(np.real(value)))
        object.__setattr__(self, "lambda_bar_values", tuple(values))
        if self.poly_order < 0:
            raise ArgumentError(f"polynomial order must be >= 0, got {self.poly_order}")
        if len(set(values)) < self.poly_order + 1:
            raise ArgumentError(
                f"order-{self.poly_order} fit needs at least {self.poly_order + 1} "
                f"distinct sample points, got {len(set(values))}"
            )


@dataclass(frozen=True)
class SweepSample:
    lambda_bar: float
    value: float


@dataclass(frozen=True)
class PolyModel:
    coeffs: tuple[float, ...]
    rms_residual: float
    continued_value: complex
    imag_defect: float
    n_samples: int

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    @property
    def exact_interpolation(self) -> bool:
        return self.order >= self.n_samples - 1

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(x, np.asarray(self.coeffs))

    def as_dict(self) -> dict:
        return {
            "coeffs": list(self.coeffs),
            "rms_residual": self.rms_residual,
            "continued_real": self.continued_value.real,
            "imag_defect": self.imag_defect,
            "n_samples": self.n_samples,
            "exact_interpolation": self.exact_interpolation,
        }


def run_sweep(sample: SampleFn, plan: SweepPlan, jobs: int = 1) -> list[SweepSample]:
    def run_one(lambda_bar: float) -> SweepSample:
        try:
            value = float(sample(lambda_bar))
        except SimulationError as exc:
            raise SweepError(
                f"sweep sample at lambda_bar={lambda_bar} failed: {exc}", lambda_bar=lambda_bar
            ) from exc
        if not math.isfinite(value):
            raise SweepError(
                f"sweep sample at lambda_bar={lambda_bar} is not finite", lambda_bar=lambda_bar
            )
        return SweepSample(lambda_bar, value)

    log.info(
        "Running %d-point sweep over lambda_bar with %d job(s)", len(plan.lambda_bar_values), jobs
    )
    return run_ordered(run_one, plan.lambda_bar_values, jobs)


def _powers_of_i(order: int) -> np.ndarray:
    return np.array([1j**k for k in range(order + 1)])


def continue_to_imag(model: PolyModel) -> tuple[float, float]:
    coeffs = np.asarray(model.coeffs)
    real = float(np.sum(coeffs[0::2] * (-1.0) ** np.arange(len(coeffs[0::2]))))
    imag = float(np.sum(coeffs[1::2] * (-1.0) ** np.arange(len(coeffs[1::2]))))
    return real, abs(imag)


def fit_poly(samples: Sequence[SweepSample], order: int) -> PolyModel:
    x = np.array([s.lambda_bar for s in samples], dtype=float)
    y = np.array([s.value for s in samples], dtype=float)
    if order < 0:
        raise ArgumentError(f"polynomial order must be >= 0, got {order}")
    if len(np.unique(x)) < order + 1:
        raise FitError(
            f"order-{order} fit needs {order + 1} distinct abscissae, got {len(np.unique(x))}"
        )
    vander = np.vander(x, order + 1, increasing=True)
    q, r = np.linalg.qr(vander)
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_RTOL * diag.max():
        raise FitError(f"Vandermonde matrix is rank deficient for order {order}")
    coeffs = linalg.solve_triangular(r, q.T @ y)
    residual = vander @ coeffs - y
    rms = math.sqrt(float(np.mean(residual**2)))
    continued = complex(np.sum(coeffs * _powers_of_i(order)))
    model = PolyModel(
        coeffs=tuple(float(c) for c in coeffs),
        rms_residual=rms,
        continued_value=continued,
        imag_defect=abs(continued.imag),
        n_samples=len(x),
    )
    if model.exact_interpolation:
        log.warning(
            "Order-%d polynomial through %d samples interpolates exactly; "
            "the continued value is not regularized by the fit",
            order,
            len(x),
        )
    return model


@dataclass(frozen=True)
class ErrorRow:
    n_sites: int
    poly_order: int
    continued: float
    imag_defect: float
    direct: float
    abs_deviation: float
    rel_deviation: float
    rms_residual: float

    def as_row(self) -> list:
        return [
            self.n_sites,
            self.poly_order,
            self.continued,
            self.imag_defect,
            self.direct,
            self.abs_deviation,
            self.rel_deviation,
            self.rms_residual,
        ]


ERROR_TABLE_COLUMNS = [
    "n_sites",
    "poly_order",
    "continued",
    "imag_defect",
    "direct",
    "abs_deviation",
    "rel_deviation",
    "rms_residual",
]


def error_vs_nm(
    n_values: Sequence[int],
    m_values: Sequence[int],
    sampler_for: Callable[[int], SampleFn],
    direct_for: Callable[[int], float],
    lambda_bar_values: Sequence[float] | None = None,
    jobs: int = 1,
) -> list[ErrorRow]:
    """One sweep and one direct run per chain length, refit for every order."""
    values = tuple(lambda_bar_values) if lambda_bar_values is not None else _default_values()
    usable = [m for m in m_values if m + 1 <= len(set(values))]
    if not usable:
        raise ArgumentError("no polynomial order fits the given number of sample points")
    rows = []
    for n in n_values:
        plan = SweepPlan(lambda_bar_values=values, poly_order=min(usable))
        samples = run_sweep(sampler_for(n), plan, jobs)
        direct = float(direct_for(n))
        for m in usable:
            fit = fit_poly(samples, m)
            continued, defect = continue_to_imag(fit)
            deviation = abs(continued - direct)
            rows.append(
                ErrorRow(
                    n_sites=n,
                    poly_order=m,
                    continued=continued,
                    imag_defect=defect,
                    direct=direct,
                    abs_deviation=deviation,
                    rel_deviation=deviation / abs(direct) if direct else math.inf,
                    rms_residual=fit.rms_residual,
                )
            )
            log.info("N=%d M=%d: |continued - direct| = %.3e", n, m, deviation)
    return rows
