from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.integrate import quad
from scipy.optimize import least_squares, minimize
from scipy.special import roots_laguerre

from app.services.errors import (
    ArgumentError,
    DomainError,
    FitError,
    FitQualityError,
    QuadratureError,
    SingularityError,
)

log = logging.getLogger(__name__)

QUAD_RTOL = 1e-10
LAGUERRE_ORDERS = (96, 192)
TAIL_CUTOFF_FACTOR = 1e3

FIT_WINDOW_START = 1e-4
FIT_WINDOW_END = 10.0
FIT_WINDOW_POINTS = 256
FIT_QUALITY_GATE = 0.05
MAX_STARTS = 8
FIT_OPTIMIZER = "nelder-mead+least-squares"

RESONANT_TRUNCATION = 3
MATSUBARA_TRUNCATION = 2

TEFF_NOISE = 1e-12
TEFF_FINITE = "finite"
TEFF_ZERO = "zero"
TEFF_INFINITE = "infinite"

Spectrum = Callable[[float], float]


def _scalar_or_array(values: np.ndarray, like: np.ndarray):
    return values.item() if like.ndim == 0 else values


@dataclass(frozen=True)
class UnderdampedBath:
    lam: float
    gamma: float
    omega0: float
    beta: float = math.inf

    def __post_init__(self):
        if self.lam <= 0:
            raise ArgumentError(f"bath coupling must be positive, got {self.lam}")
        if self.gamma <= 0:
            raise ArgumentError(f"bath width must be positive, got {self.gamma}")
        if self.omega0 <= self.gamma / 2:
            raise ArgumentError(
                f"omega0={self.omega0} must exceed gamma/2={self.gamma / 2} "
                "(underdamped regime)"
            )
        if not self.beta > 0:
            raise ArgumentError(f"inverse temperature must be positive, got {self.beta}")

    @property
    def Gamma(self) -> float:
        return self.gamma / 2

    @property
    def Omega(self) -> float:
        return math.sqrt(self.omega0**2 - self.Gamma**2)

    @property
    def zero_temperature(self) -> bool:
        return math.isinf(self.beta)

    def as_dict(self) -> dict:
        return {
            "lam": self.lam,
            "gamma": self.gamma,
            "omega0": self.omega0,
            "beta": None if self.zero_temperature else self.beta,
        }


@dataclass(frozen=True)
class PseudomodeParams:
    omega: float
    lam: float
    lindblad_rate: float
    truncation: int
    lambda_bar_power: int = 0

    def __post_init__(self):
        if self.lindblad_rate <= 0:
            raise ArgumentError(f"Lindblad rate must be positive, got {self.lindblad_rate}")
        if self.truncation < 2:
            raise ArgumentError(f"Fock truncation must be >= 2, got {self.truncation}")
        if self.lambda_bar_power not in (0, 1):
            raise ArgumentError(
                f"lambda_bar_power must be 0 or 1, got {self.lambda_bar_power}"
            )

    def as_dict(self) -> dict:
        return {
            "omega": self.omega,
            "lam": self.lam,
            "lindblad_rate": self.lindblad_rate,
            "truncation": self.truncation,
            "lambda_bar_power": self.lambda_bar_power,
        }


@dataclass(frozen=True)
class FitWindow:
    t_min: float
    t_max: float
    n_points: int

    @classmethod
    def for_bath(cls, bath: UnderdampedBath) -> FitWindow:
        return cls(
            t_min=FIT_WINDOW_START / bath.Gamma,
            t_max=FIT_WINDOW_END / bath.Gamma,
            n_points=FIT_WINDOW_POINTS,
        )

    def samples(self) -> np.ndarray:
        # t = 0 is always sampled in addition to the logarithmic grid
        grid = np.geomspace(self.t_min, self.t_max, self.n_points)
        return np.concatenate(([0.0], grid))

    def as_dict(self) -> dict:
        return {
            "t_min": self.t_min,
            "t_max": self.t_max,
            "n_points": self.n_points,
            "includes_t0": True,
        }


@dataclass(frozen=True)
class ExpFitResult:
    terms: tuple[tuple[float, float], ...]
    window: FitWindow
    rms_residual: float
    n_starts: int = 0
    optimizer: str = FIT_OPTIMIZER
    seeds: tuple[float, ...] = field(default=())

    def __post_init__(self):
        terms = tuple(
            sorted(((float(a), float(r)) for a, r in self.terms), key=lambda term: term[1])
        )
        for amp, rate in terms:
            if amp <= 0 or rate <= 0:
                raise FitError(f"fit produced non-positive term (amp={amp}, rate={rate})")
        object.__setattr__(self, "terms", terms)

    @property
    def amps(self) -> np.ndarray:
        return np.array([amp for amp, _ in self.terms])

    @property
    def rates(self) -> np.ndarray:
        return np.array([rate for _, rate in self.terms])

    def evaluate(self, t):
        t = np.asarray(t, dtype=float)
        values = _exp_sum(self.amps, self.rates, np.abs(t).ravel()).reshape(t.shape)
        return _scalar_or_array(values, t)

    def as_dict(self) -> dict:
        return {
            "terms": [{"amp": amp, "rate": rate} for amp, rate in self.terms],
            "window": self.window.as_dict(),
            "rms_residual": self.rms_residual,
            "n_starts": self.n_starts,
            "optimizer": self.optimizer,
            "seed_rates": list(self.seeds),
        }


@dataclass(frozen=True)
class EffectiveTemperature:
    value: float
    regime: str


def spectral_density(bath: UnderdampedBath, w):
    w = np.asarray(w, dtype=float)
    result = (
        bath.lam**2
        * bath.gamma
        * w
        / ((w**2 - bath.omega0**2) ** 2 + bath.gamma**2 * w**2)
    )
    return _scalar_or_array(np.asarray(result), w)


def power_spectrum(bath: UnderdampedBath, w):
    w = np.asarray(w, dtype=float)
    j = np.asarray(spectral_density(bath, w))
    if bath.zero_temperature:
        result = np.where(w > 0, 2 * j, 0.0)
    else:
        if np.any(w == 0):
            raise SingularityError(
                "power spectrum is singular at zero frequency for finite temperature"
            )
        # n_th + 1 = 1 / (1 - exp(-beta w))
        result = 2 * j * (-1.0 / np.expm1(-bath.beta * w))
    return _scalar_or_array(np.asarray(result, dtype=float), w)


def damped_mode_correlation(mode: PseudomodeParams, t, lambda_bar_sq: float = 1.0):
    t = np.asarray(t, dtype=float)
    abs_t = np.abs(t)
    weight = lambda_bar_sq**mode.lambda_bar_power
    result = (
        weight
        * mode.lam**2
        * np.exp(-1j * mode.omega * abs_t - 0.5 * mode.lindblad_rate * abs_t)
    )
    result = np.where(t < 0, np.conj(result), result)
    return _scalar_or_array(np.asarray(result, dtype=complex), t)


def mode_spectrum(mode: PseudomodeParams, lambda_bar_sq: float, w):
    w = np.asarray(w, dtype=float)
    weight = lambda_bar_sq**mode.lambda_bar_power
    rate = mode.lindblad_rate
    result = weight * mode.lam**2 * rate / ((w - mode.omega) ** 2 + (rate / 2) ** 2)
    return _scalar_or_array(np.asarray(result, dtype=float), w)


def resonant_mode(bath: UnderdampedBath, truncation: int = RESONANT_TRUNCATION) -> PseudomodeParams:
    return PseudomodeParams(
        omega=bath.Omega,
        lam=bath.lam / math.sqrt(2 * bath.Omega),
        lindblad_rate=bath.gamma,
        truncation=truncation,
        lambda_bar_power=0,
    )


def _require_zero_temperature(bath: UnderdampedBath) -> None:
    if not bath.zero_temperature:
        raise DomainError("the Matsubara integral is only implemented at zero temperature")


def _matsubara_denominator(bath: UnderdampedBath, x):
    # [(Omega + i Gamma)^2 + x^2][(Omega - i Gamma)^2 + x^2], written in real form
    return (x**2 + bath.omega0**2) ** 2 - bath.gamma**2 * x**2


def _matsubara_prefactor(bath: UnderdampedBath) -> float:
    return -bath.gamma * bath.lam**2 / math.pi


def _laguerre_integral(bath: UnderdampedBath, t: float, order: int) -> float:
    nodes, weights = roots_laguerre(order)
    x = nodes / t
    return float(np.sum(weights * nodes / _matsubara_denominator(bath, x))) / t**2


def _adaptive_integral(bath: UnderdampedBath, t: float) -> float:
    def integrand(x: float) -> float:
        return x * math.exp(-x * t) / _matsubara_denominator(bath, x)

    if t > 0:
        value, abserr = quad(integrand, 0, np.inf, epsabs=0, epsrel=QUAD_RTOL, limit=500)
    else:
        cutoff = TAIL_CUTOFF_FACTOR * bath.omega0
        value, abserr = quad(
            integrand,
            0,
            cutoff,
            epsabs=0,
            epsrel=QUAD_RTOL,
            limit=500,
            points=[bath.omega0],
        )
        # x / D(x) ~ x^-3 beyond the cutoff
        value += 1.0 / (2 * cutoff**2)
    if not math.isfinite(value) or abserr > 1e2 * QUAD_RTOL * abs(value):
        raise QuadratureError(
            f"Matsubara quadrature did not converge at t={t} "
            f"(value {value:.6g}, abserr {abserr:.3g})",
            value=value,
            abserr=abserr,
        )
    return value


def _matsubara_integral(bath: UnderdampedBath, t: float) -> float:
    if t > 0:
        low, high = (_laguerre_integral(bath, t, order) for order in LAGUERRE_ORDERS)
        if abs(high - low) <= QUAD_RTOL * abs(high):
            return high
    return _adaptive_integral(bath, t)


def matsubara_ct(bath: UnderdampedBath, t):
    _require_zero_temperature(bath)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("matsubara_ct is defined for t >= 0")
    flat = [_matsubara_integral(bath, float(value)) for value in t.ravel()]
    result = _matsubara_prefactor(bath) * np.array(flat).reshape(t.shape)
    return _scalar_or_array(result, t)


def matsubara_spectrum(bath: UnderdampedBath, w):
    _require_zero_temperature(bath)
    w = np.asarray(w, dtype=float)
    out = np.empty(w.shape)
    for index, value in np.ndenumerate(w):
        w2 = value**2

        def integrand(x: float) -> float:
            return 2 * x**2 / ((x**2 + w2) * _matsubara_denominator(bath, x))

        split = 10 * max(abs(value), bath.omega0)
        head, head_err = quad(integrand, 0, split, epsabs=0, epsrel=QUAD_RTOL, limit=500)
        tail, tail_err = quad(integrand, split, np.inf, epsabs=0, epsrel=QUAD_RTOL, limit=500)
        total = head + tail
        if head_err + tail_err > 1e2 * QUAD_RTOL * abs(total):
            raise QuadratureError(
                f"Matsubara spectrum quadrature did not converge at w={value}",
                value=total,
                abserr=head_err + tail_err,
            )
        out[index] = _matsubara_prefactor(bath) * total
    return _scalar_or_array(out, w)


def exact_decomposition(bath: UnderdampedBath, w):
    return mode_spectrum(resonant_mode(bath), 1.0, w) + matsubara_spectrum(bath, w)


def _exp_sum(amps: np.ndarray, rates: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.exp(-np.outer(t, rates)) @ amps


def _amplitude_splits(n_terms: int) -> list[np.ndarray]:
    even = np.full(n_terms, 1.0 / n_terms)
    front = 0.8 ** np.arange(n_terms)
    return [even, front / front.sum()]


def _initial_guesses(
    y0: float, n_terms: int, seed_rates: Sequence[float]
) -> list[np.ndarray]:
    seeds = sorted(seed_rates)
    while len(seeds) < n_terms:
        seeds.append(seeds[-1] * 4)
    guesses = []
    for split in _amplitude_splits(n_terms):
        for rates in combinations(seeds, n_terms):
            amps = y0 * split
            guesses.append(np.log(np.concatenate((amps, rates))))
    return guesses[:MAX_STARTS]


def fit_exponentials(
    t: np.ndarray,
    y: np.ndarray,
    n_terms: int,
    seed_rates: Sequence[float],
    extra_starts: Sequence[np.ndarray] = (),
) -> tuple[np.ndarray, np.ndarray, float, int]:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if n_terms < 1:
        raise ArgumentError(f"need at least one exponential term, got {n_terms}")
    if len(t) < 2 * n_terms:
        raise ArgumentError(f"{len(t)} samples cannot determine {n_terms} terms")
    scale = float(np.max(np.abs(y))) or 1.0

    def residuals(params: np.ndarray) -> np.ndarray:
        amps = np.exp(params[:n_terms])
        rates = np.exp(params[n_terms:])
        return (_exp_sum(amps, rates, t) - y) / scale

    def objective(params: np.ndarray) -> float:
        r = residuals(params)
        return float(np.mean(r * r))

    starts = _initial_guesses(scale, n_terms, seed_rates) + list(extra_starts)
    best_params = None
    best_value = math.inf
    for start in starts:
        simplex = minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-20, "maxiter": 4000, "maxfev": 8000},
        )
        candidate = simplex.x
        try:
            polished = least_squares(residuals, candidate, xtol=1e-15, ftol=1e-15, gtol=1e-15)
            if objective(polished.x) < objective(candidate):
                candidate = polished.x
        except (ValueError, FloatingPointError) as exc:
            log.debug("Least-squares polish failed from start %s: %s", start, exc)
        value = objective(candidate)
        log.debug("Exponential fit start %s -> objective %.3e", np.exp(start), value)
        if math.isfinite(value) and value < best_value:
            best_value = value
            best_params = candidate

    if best_params is None:
        raise FitError(f"exponential fit failed from all {len(starts)} starts")
    amps = np.exp(best_params[:n_terms])
    rates = np.exp(best_params[n_terms:])
    rms = math.sqrt(float(np.mean((_exp_sum(amps, rates, t) - y) ** 2)))
    return amps, rates, rms, len(starts)


def matsubara_seed_rates(bath: UnderdampedBath) -> tuple[float, ...]:
    return (bath.Gamma / 4, bath.Gamma, 4 * bath.Gamma, bath.omega0)


def _nested_fit(
    t: np.ndarray, y: np.ndarray, n_terms: int, seeds: Sequence[float]
) -> tuple[np.ndarray, np.ndarray, float, int]:
    extra: list[np.ndarray] = []
    if n_terms > 1:
        # grow the (n-1)-term optimum by one small fast term, so more terms never fit worse
        amps, rates, _, _ = _nested_fit(t, y, n_terms - 1, seeds)
        tiny = 1e-8 * float(np.max(np.abs(y)))
        for extra_rate in (4 * float(rates.max()), 0.25 * float(rates.min())):
            extra.append(
                np.log(np.concatenate((amps, [tiny], rates, [extra_rate])))
            )
    return fit_exponentials(t, y, n_terms, seeds, extra_starts=extra)


def fit_matsubara(
    bath: UnderdampedBath,
    n_terms: int = 2,
    window: FitWindow | None = None,
    gate: float | None = FIT_QUALITY_GATE,
) -> ExpFitResult:
    _require_zero_temperature(bath)
    window = window or FitWindow.for_bath(bath)
    t = window.samples()
    y = np.abs(np.asarray(matsubara_ct(bath, t)))
    m0 = float(y[0])
    seeds = matsubara_seed_rates(bath)
    amps, rates, rms, n_starts = _nested_fit(t, y, n_terms, seeds)
    relative = rms / m0
    result = ExpFitResult(
        terms=tuple(zip(amps, rates)),
        window=window,
        rms_residual=relative,
        n_starts=n_starts,
        seeds=tuple(seeds),
    )
    log.info(
        "Matsubara fit with %d terms: rms residual %.3e of |M(0)|", n_terms, relative
    )
    if gate is not None and relative >= gate:
        raise FitQualityError(
            f"Matsubara fit residual {relative:.3g} exceeds gate {gate} of |M(0)|; "
            "try more terms or a different window",
            rms_residual=relative,
            threshold=gate,
        )
    return result


def to_pseudomodes(
    bath: UnderdampedBath,
    fit: ExpFitResult,
    truncations: Sequence[int] | None = None,
) -> list[PseudomodeParams]:
    n_fit = len(fit.terms)
    if truncations is None:
        truncations = (RESONANT_TRUNCATION,) + (MATSUBARA_TRUNCATION,) * n_fit
    if len(truncations) != n_fit + 1:
        raise ArgumentError(
            f"expected {n_fit + 1} truncations (resonant + fitted modes), got {len(truncations)}"
        )
    modes = [resonant_mode(bath, truncations[0])]
    for (amp, rate), truncation in zip(fit.terms, truncations[1:]):
        modes.append(
            PseudomodeParams(
                omega=0.0,
                lam=math.sqrt(amp),
                lindblad_rate=2 * rate,
                truncation=int(truncation),
                lambda_bar_power=1,
            )
        )
    return modes


def s_fit(modes: Sequence[PseudomodeParams], lambda_bar_sq: float, w):
    w = np.asarray(w, dtype=float)
    total = np.zeros(w.shape)
    for mode in modes:
        total = total + np.asarray(mode_spectrum(mode, lambda_bar_sq, w))
    return _scalar_or_array(total, w)


def t_eff(spectrum: Spectrum, w: float) -> EffectiveTemperature:
    if w == 0:
        raise DomainError("effective temperature is undefined at zero frequency")
    s_pos = float(spectrum(w))
    s_neg = float(spectrum(-w))
    if s_pos <= 0:
        raise DomainError(f"spectrum must be positive at w={w}, got {s_pos}")
    if s_neg <= TEFF_NOISE * s_pos:
        return EffectiveTemperature(0.0, TEFF_ZERO)
    log_ratio = math.log(s_pos / s_neg)
    if abs(log_ratio) <= TEFF_NOISE:
        return EffectiveTemperature(math.inf, TEFF_INFINITE)
    return EffectiveTemperature(w / log_ratio, TEFF_FINITE)


def t_eff_grid(spectrum: Spectrum, ws: Sequence[float]) -> np.ndarray:
    # T_eff is even in w, so each point is evaluated at |w|
    out = np.full(len(ws), np.nan)
    for k, w in enumerate(ws):
        w = abs(float(w))
        if w == 0:
            continue
        try:
            out[k] = t_eff(spectrum, w).value
        except DomainError:
            continue
    return out


def fit_document(bath: UnderdampedBath, fit: ExpFitResult) -> dict:
    payload = fit.as_dict()
    payload["bath"] = bath.as_dict()
    payload["bath"]["Omega"] = bath.Omega
    payload["bath"]["Gamma"] = bath.Gamma
    return payload
