import click

from app.cli.commands import evolve_command, extrapolate_command, fit_bath_command, scan_command


def register_commands(group: click.Group) -> None:
    group.add_command(fit_bath_command)
    group.add_command(evolve_command)
    group.add_command(scan_command)
    group.add_command(extrapolate_command)
