from __future__ import annotations

import functools
import logging
from pathlib import Path

import click

from app.jobs.pool import clamp_jobs
from app.models import RunConfig
from app.services.common import write_csv, write_json
from app.services.continuation import ERROR_TABLE_COLUMNS
from app.services.errors import ConfigError, SimulationError
from app.services.pipelines import (
    MODEL_BMS,
    MODEL_FULL,
    MODEL_KINDS,
    MODEL_SINGLE,
    SPECTRUM_FIT,
    SPECTRUM_KINDS,
    SPECTRUM_RESONANT,
    bath_fit_payload,
    bms_spectrum,
    final_slice,
    fit_modes,
    prepare,
    references,
    run_bms,
    run_error_table,
    run_extrapolation,
    run_pseudomode,
    run_scan,
    schedule_of,
    segment_summaries,
    spectra_table,
)

log = logging.getLogger(__name__)

config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="JSON run configuration; defaults reproduce the N=5 main parameter set.",
)
jobs_option = click.option(
    "--jobs", type=int, default=None, help="Parallel workers for independent simulations."
)
out_option = click.option(
    "--out",
    "out_dir",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Output directory (overrides output.directory).",
)


def handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            ctx.exit(exc.exit_code)
        except SimulationError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)

    return wrapper


class OutputWriter:
    def __init__(self, directory: Path, formats: tuple[str, ...]):
        self.directory = Path(directory)
        self.formats = formats
        self.written: list[Path] = []

    def csv(self, name: str, header, rows) -> None:
        if "csv" in self.formats:
            self._record(write_csv(self.directory / name, header, rows))

    def json(self, name: str, payload: dict) -> None:
        if "json" in self.formats:
            self._record(write_json(self.directory / name, payload))

    def _record(self, path: Path) -> None:
        log.info("Wrote %s", path)
        self.written.append(path)
        click.echo(str(path))


def _load_config(config_path: Path | None) -> RunConfig:
    return RunConfig.from_file(config_path) if config_path else RunConfig()


def _writer(cfg: RunConfig, out_dir: Path | None) -> OutputWriter:
    settings = click.get_current_context().find_root().obj
    directory = out_dir or cfg.output.directory or settings.ANCILLA_OUTPUT_DIR
    return OutputWriter(Path(directory), cfg.output.formats)


def _jobs(jobs: int | None) -> int:
    settings = click.get_current_context().find_root().obj
    return clamp_jobs(jobs or settings.ANCILLA_JOBS, settings.ANCILLA_MAX_JOBS)


@click.command("fit-bath")
@config_option
@out_option
@handles_errors
def fit_bath_command(config_path: Path | None, out_dir: Path | None) -> None:
    """Fit the Matsubara correction and emit the ancilla spectra."""
    cfg = _load_config(config_path)
    writer = _writer(cfg, out_dir)
    setup = prepare(cfg)
    fit, modes = fit_modes(setup)
    payload = bath_fit_payload(setup, fit, modes)
    payload["config"] = cfg.as_dict()
    writer.json("bath_fit.json", payload)
    header, rows = spectra_table(setup, modes)
    writer.csv("spectra.csv", header, rows)


@click.command("evolve")
@config_option
@click.option("--model", "model_kind", type=click.Choice(MODEL_KINDS), default=MODEL_FULL)
@click.option(
    "--spectrum",
    "spectrum_kind",
    type=click.Choice(SPECTRUM_KINDS),
    default=SPECTRUM_FIT,
    help="Bath spectrum driving the secular master equation (bms model only).",
)
@out_option
@handles_errors
def evolve_command(
    config_path: Path | None, model_kind: str, spectrum_kind: str, out_dir: Path | None
) -> None:
    """Evolve one model and write its trajectory and summary."""
    cfg = _load_config(config_path)
    writer = _writer(cfg, out_dir)
    setup = prepare(cfg)
    fit, modes = fit_modes(setup)
    summary = {"model": model_kind}
    if model_kind == MODEL_BMS:
        trajectory, genr = run_bms(setup, modes, spectrum_kind)
        spectrum = bms_spectrum(setup, modes, spectrum_kind)
        name = f"bms_{spectrum_kind}"
        summary["spectrum"] = spectrum_kind
        summary["transitions"] = len(genr.transitions)
        summary["clipped_rate"] = genr.clipped_rate
    else:
        trajectory = run_pseudomode(setup, modes, model_kind)
        resonant_only = model_kind == MODEL_SINGLE
        spectrum = bms_spectrum(setup, modes, SPECTRUM_RESONANT if resonant_only else SPECTRUM_FIT)
        name = model_kind
        summary["segments"] = segment_summaries(trajectory, schedule_of(cfg))

    summary.update(
        {
            "final_fidelity": trajectory.final("fidelity"),
            "final_energy_error": trajectory.final("energy_error"),
            "t_final": float(trajectory.times[-1]),
            "step": trajectory.step,
            "max_trace_dev": float(trajectory.trace_dev.max()),
            "max_herm_dev": float(trajectory.herm_dev.max()),
            "ground": {
                "e_ground": setup.ground.e_ground,
                "e01": setup.ground.e01,
                "degeneracy": setup.ground.degeneracy,
            },
            "bath": setup.bath.as_dict(),
            "fit": fit.as_dict(),
            "references": references(setup, modes, spectrum),
            "config": cfg.as_dict(),
        }
    )
    click.echo(
        f"{name}: final fidelity {summary['final_fidelity']:.6f}, "
        f"energy error {summary['final_energy_error']:.3e} g"
    )
    writer.csv(f"trajectory_{name}.csv", trajectory.columns(), trajectory.rows())
    writer.json(f"summary_{name}.json", summary)


@click.command("scan")
@config_option
@jobs_option
@out_option
@handles_errors
def scan_command(config_path: Path | None, jobs: int | None, out_dir: Path | None) -> None:
    """Fidelity over time and bath resonance frequency."""
    cfg = _load_config(config_path)
    writer = _writer(cfg, out_dir)
    results = run_scan(cfg, _jobs(jobs))
    grid = [
        [omega0, float(t), float(f)]
        for omega0, trajectory in results
        for t, f in zip(trajectory.times, trajectory.series["fidelity"])
    ]
    final = [
        [omega0, trajectory.final("fidelity"), trajectory.final("energy_error")]
        for omega0, trajectory in results
    ]
    best_omega0, best_fidelity = final_slice(results)
    writer.csv("scan_grid.csv", ["omega0", "time", "fidelity"], grid)
    writer.csv("scan_final.csv", ["omega0", "fidelity", "energy_error"], final)
    writer.json(
        "scan_summary.json",
        {
            "best_omega0": best_omega0,
            "best_fidelity": best_fidelity,
            "t_final": cfg.scan.t_max,
            "config": cfg.as_dict(),
        },
    )
    click.echo(f"best final fidelity {best_fidelity:.6f} at omega0={best_omega0:.6g}")


@click.command("extrapolate")
@config_option
@jobs_option
@out_option
@handles_errors
def extrapolate_command(config_path: Path | None, jobs: int | None, out_dir: Path | None) -> None:
    """Sweep real lambda_bar, fit a polynomial and continue it to lambda_bar = i."""
    cfg = _load_config(config_path)
    writer = _writer(cfg, out_dir)
    workers = _jobs(jobs)
    setup = prepare(cfg)
    _, modes = fit_modes(setup)
    samples, _, payload = run_extrapolation(setup, modes, workers)
    payload["config"] = cfg.as_dict()
    writer.csv(
        "sweep.csv",
        ["lambda_bar", "observable"],
        [[s.lambda_bar, s.value] for s in samples],
    )
    writer.json("continuation.json", payload)
    message = f"continued <H_s> = {payload['continued_real']:.8g}"
    if "deviation" in payload:
        message += f" (direct {payload['direct_reference']:.8g}, deviation {payload['deviation']:.3e})"
    click.echo(message)

    table = cfg.sweep.error_table
    if table.n_values and table.m_values:
        rows = run_error_table(cfg, workers)
        writer.csv("error_table.csv", ERROR_TABLE_COLUMNS, [row.as_row() for row in rows])
