import click

from josa import commands
from josa.cliutils import configure_logging
from josa.config import describe_keys


@click.group(epilog="\b\nConfiguration keys and defaults:\n" + describe_keys())
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def josa(verbose):
    """Joint registration of geometric and functional maps on the sphere with
    simultaneous atlas estimation.

    Every command writes its outputs, the resolved configuration and a log to
    a run directory.
    """
    configure_logging(verbose)


josa.add_command(commands.synth)
josa.add_command(commands.fit)
josa.add_command(commands.register)
josa.add_command(commands.evaluate_command)
josa.add_command(commands.ablate)
josa.add_command(commands.check_grad)
josa.add_command(commands.check_likelihood)
