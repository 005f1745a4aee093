from __future__ import annotations

import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from app.services.errors import ConfigError

DEFAULT_OMEGA0_E01_MULTIPLE = 1.2
DEFAULT_GAMMA = 3.8


def _number(path: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(path, f"expected a finite number, got {value!r}")
    return float(value)


def _positive(path: str, value) -> float:
    value = _number(path, value)
    if value <= 0:
        raise ConfigError(path, f"must be positive, got {value}")
    return value


def _non_negative(path: str, value) -> float:
    value = _number(path, value)
    if value < 0:
        raise ConfigError(path, f"must be non-negative, got {value}")
    return value


def _integer(minimum: int):
    def parse(path: str, value) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        if value < minimum:
            raise ConfigError(path, f"must be >= {minimum}, got {value}")
        return value

    return parse


def _optional(parser):
    def parse(path: str, value):
        return None if value is None else parser(path, value)

    return parse


def _list_of(parser, min_length: int = 0):
    def parse(path: str, value) -> tuple:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if len(value) < min_length:
            raise ConfigError(path, f"needs at least {min_length} entries")
        return tuple(parser(f"{path}[{k}]", item) for k, item in enumerate(value))

    return parse


def _choice(*options: str):
    def parse(path: str, value) -> str:
        if value not in options:
            raise ConfigError(path, f"expected one of {list(options)}, got {value!r}")
        return value

    return parse


def _beta(path: str, value) -> float:
    if value is None or value == "inf":
        return math.inf
    return _positive(path, value)


def _complex(path: str, value) -> complex:
    if isinstance(value, str):
        try:
            return complex(value.replace(" ", "").replace("i", "j"))
        except ValueError:
            raise ConfigError(path, f"cannot parse {value!r} as a complex number") from None
    return complex(_number(path, value))


def _segment(path: str, value) -> tuple[float, float]:
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError(path, "expected a [t_start, scale] pair")
    return (_non_negative(f"{path}[0]", value[0]), _non_negative(f"{path}[1]", value[1]))


def _string(path: str, value) -> str:
    if not isinstance(value, str) or not value:
        raise ConfigError(path, f"expected a non-empty string, got {value!r}")
    return value


def _flag(path: str, value) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(path, f"expected true or false, got {value!r}")
    return value


def _setting(parser, default=MISSING, default_factory=MISSING):
    return field(default=default, default_factory=default_factory, metadata={"parse": parser})


def _parse_section(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected an object, got {raw!r}")
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
        meta = known[key].metadata
        child = f"{path}.{key}" if path else key
        if "section" in meta:
            values[key] = _parse_section(meta["section"], value, child)
        else:
            values[key] = meta["parse"](child, value)
    return cls(**values)


def _section(cls):
    return field(default_factory=cls, metadata={"section": cls})


@dataclass(frozen=True)
class SystemSection:
    n: int = _setting(_integer(2), 5)
    g: float = _setting(_positive, 1.0)
    j: float = _setting(_number, 5.0)
    q_coeffs: tuple[float, ...] = _setting(_list_of(_number, 3), (1.0, 1.1, 0.9))
    ground_gap_ratio: float = _setting(_non_negative, 0.05)

    def __post_init__(self):
        if len(self.q_coeffs) != 3:
            raise ConfigError("system.q_coeffs", "needs exactly three entries")


@dataclass(frozen=True)
class BathSection:
    omega0: float | None = _setting(_optional(_positive), None)
    omega0_e01_multiple: float | None = _setting(_optional(_positive), None)
    gamma: float | None = _setting(_optional(_positive), None)
    gamma_omega0_multiple: float | None = _setting(_optional(_positive), None)
    lambda_prefactor: float = _setting(_positive, 1.15)
    beta: float = _setting(_beta, math.inf)

    def __post_init__(self):
        if self.omega0 is not None and self.omega0_e01_multiple is not None:
            raise ConfigError("bath.omega0", "give omega0 or omega0_e01_multiple, not both")
        if self.gamma is not None and self.gamma_omega0_multiple is not None:
            raise ConfigError("bath.gamma", "give gamma or gamma_omega0_multiple, not both")
        if self.omega0 is None and self.omega0_e01_multiple is None:
            object.__setattr__(self, "omega0_e01_multiple", DEFAULT_OMEGA0_E01_MULTIPLE)
        if self.gamma is None and self.gamma_omega0_multiple is None:
            object.__setattr__(self, "gamma", DEFAULT_GAMMA)


@dataclass(frozen=True)
class FitWindowSection:
    t_min_gamma: float = _setting(_positive, 1e-4)
    t_max_gamma: float = _setting(_positive, 10.0)
    n_points: int = _setting(_integer(8), 256)

    def __post_init__(self):
        if self.t_min_gamma >= self.t_max_gamma:
            raise ConfigError("modes.fit_window", "t_min_gamma must be below t_max_gamma")


@dataclass(frozen=True)
class ModesSection:
    n_fit_terms: int = _setting(_integer(1), 2)
    truncations: tuple[int, ...] | None = _setting(_optional(_list_of(_integer(2), 1)), None)
    fit_window: FitWindowSection = _section(FitWindowSection)
    lambda_bar: complex = _setting(_complex, 1j)
    fit_gate: float = _setting(_positive, 0.05)

    def __post_init__(self):
        if self.truncations is not None and len(self.truncations) != self.n_fit_terms + 1:
            raise ConfigError(
                "modes.truncations",
                f"expected {self.n_fit_terms + 1} entries (resonant mode + fitted modes)",
            )


@dataclass(frozen=True)
class SolverSection:
    h: float | None = _setting(_optional(_positive), None)
    t_max: float = _setting(_positive, 200.0)
    n_times: int = _setting(_integer(2), 201)
    steady_tol: float = _setting(_positive, 1e-6)
    steady_t_cap: float = _setting(_positive, 500.0)
    initial_state: str = _setting(_choice("maximally_mixed", "all_up", "random_pure"), "maximally_mixed")
    seed: int | None = _setting(_optional(_integer(0)), None)


@dataclass(frozen=True)
class ScheduleSection:
    segments: tuple[tuple[float, float], ...] = _setting(_list_of(_segment, 1), ((0.0, 1.0),))

    def __post_init__(self):
        starts = [t for t, _ in self.segments]
        if starts[0] != 0.0:
            raise ConfigError("schedule.segments[0]", "first segment must start at t=0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("schedule.segments", "start times must be strictly increasing")


def _default_lambda_bars() -> tuple[float, ...]:
    return tuple(k / 8 for k in range(9))


@dataclass(frozen=True)
class ErrorTableSection:
    n_values: tuple[int, ...] = _setting(_list_of(_integer(2)), ())
    m_values: tuple[int, ...] = _setting(_list_of(_integer(0)), ())


@dataclass(frozen=True)
class SweepSection:
    lambda_bar_values: tuple[float, ...] = _setting(
        _list_of(_number, 1), default_factory=_default_lambda_bars
    )
    poly_order: int = _setting(_integer(0), 6)
    t_obs: float | None = _setting(_optional(_positive), None)
    direct_reference: bool = _setting(_flag, True)
    error_table: ErrorTableSection = _section(ErrorTableSection)

    def __post_init__(self):
        if len(set(self.lambda_bar_values)) < self.poly_order + 1:
            raise ConfigError(
                "sweep.poly_order",
                f"order {self.poly_order} needs {self.poly_order + 1} distinct lambda_bar values",
            )


def _default_omega0_grid() -> tuple[float, ...]:
    return tuple(0.5 + 0.075 * k for k in range(21))


@dataclass(frozen=True)
class ScanSection:
    omega0_grid: tuple[float, ...] = _setting(
        _list_of(_positive, 1), default_factory=_default_omega0_grid
    )
    omega0_units: str = _setting(_choice("e01", "absolute"), "e01")
    t_max: float = _setting(_positive, 50.0)
    n_times: int = _setting(_integer(2), 51)


@dataclass(frozen=True)
class OutputSection:
    directory: str | None = _setting(_optional(_string), None)
    formats: tuple[str, ...] = _setting(_list_of(_choice("csv", "json"), 1), ("csv", "json"))


@dataclass(frozen=True)
class RunConfig:
    system: SystemSection = _section(SystemSection)
    bath: BathSection = _section(BathSection)
    modes: ModesSection = _section(ModesSection)
    solver: SolverSection = _section(SolverSection)
    schedule: ScheduleSection = _section(ScheduleSection)
    sweep: SweepSection = _section(SweepSection)
    scan: ScanSection = _section(ScanSection)
    output: OutputSection = _section(OutputSection)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        return _parse_section(cls, raw, "")

    @classmethod
    def from_file(cls, path: Path | str) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("", f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def as_dict(self) -> dict:
        payload = asdict(self)
        payload["bath"]["beta"] = None if math.isinf(self.bath.beta) else self.bath.beta
        return payload
