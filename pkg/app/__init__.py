import click

from app.config import Config
from app.extensions import configure_logging


def create_cli(config_object=Config) -> click.Group:
    @click.group(help="Dissipative ground-state preparation with pseudomode ancillas.")
    @click.pass_context
    def cli(ctx: click.Context) -> None:
        ctx.obj = config_object
        configure_logging(config_object.ANCILLA_LOG_LEVEL)

    from app.cli import register_commands

    register_commands(cli)
    return cli
