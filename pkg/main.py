import logging
import sys
from pathlib import Path
from typing import Annotated, Callable, Optional

import click
import typer
from pydantic import ValidationError
from typer.core import TyperGroup

from dependencies import CliState
from errors import ProvHuntError
from routers import evaluation, model, pipeline
from storage import describe_validation_error

logger = logging.getLogger(__name__)

# --- EXCEPTION HANDLERS ---
ExceptionHandler = Callable[[Exception], int]
_handlers: list[tuple[type[Exception], ExceptionHandler]] = []


def exception_handler(exc_type: type[Exception]):
    """ Register `func` as the handler for `exc_type`; the first matching entry wins. """
    def register(func: ExceptionHandler) -> ExceptionHandler:
        _handlers.append((exc_type, func))
        return func
    return register


@exception_handler(ProvHuntError)
def pipeline_error_handler(exc: ProvHuntError) -> int:
    """
    Our own errors: one diagnostic line, exit 1 for bad input and 2 for
    failures of the work itself.
    """
    typer.echo(f"error: {exc}", err=True)
    return exc.exit_code


@exception_handler(ValidationError)
def validation_error_handler(exc: ValidationError) -> int:
    """ Config or document schema violations, reduced to the first bad field. """
    typer.echo(f"error: {describe_validation_error(exc)}", err=True)
    return 1


@exception_handler(click.ClickException)
def usage_error_handler(exc: click.ClickException) -> int:
    """ Unknown subcommand, missing or malformed flags. """
    exc.show()
    return 1


@exception_handler(click.exceptions.Abort)
def abort_handler(exc: click.exceptions.Abort) -> int:
    typer.echo("Aborted!", err=True)
    return 1


def dispatch(invoke: Callable[[], object]) -> int:
    try:
        result = invoke()
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except Exception as exc:
        for exc_type, handler in _handlers:
            if isinstance(exc, exc_type):
                return handler(exc)
        logger.error(f"Unhandled error: {exc}", exc_info=True)
        return 2
    return result if isinstance(result, int) else 0


class HuntGroup(TyperGroup):
    """ Click group that routes every error through the handlers above. """

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        code = dispatch(
            lambda: super(HuntGroup, self).main(
                args=args, prog_name=prog_name, complete_var=complete_var, standalone_mode=False, **extra
            )
        )
        if standalone_mode:
            sys.exit(code)
        return code


# Initialize CLI App
app = typer.Typer(
    cls=HuntGroup,
    name="provhunt",
    help="Threat hunting by matching attack query graphs against provenance graphs.",
    no_args_is_help=True,
    add_completion=False,
    pretty_exceptions_enable=False,
)


@app.callback()
def configure(
    ctx: typer.Context,
    config: Annotated[Optional[Path], typer.Option(help="JSON run config; flags override it.")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Global seed, fanned out to per-stage seeds.")] = None,
    quiet: Annotated[bool, typer.Option("--quiet", help="Only warnings and errors; no progress bars.")] = False,
):
    """
    **Global Options**

    Sets up logging once and stores the shared flags for the subcommands.
    """
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    ctx.obj = CliState(config=config, seed=seed, quiet=quiet)


# --- COMMANDS ---

# Data: synthetic events, provenance graph, reduction, embeddings, training pairs
app.command("synth")(pipeline.synth)
app.command("ingest")(pipeline.ingest)
app.command("reduce")(pipeline.reduce_graph)
app.command("embed")(pipeline.embed)
app.command("gen-train")(pipeline.gen_train)
# Model: training, single-pair matching, ranked hunting
app.command("train")(model.train)
app.command("match")(model.match)
app.command("hunt")(model.hunt)
# Evaluation: AUC report, WL baseline, inconsistency scores
app.command("eval")(evaluation.evaluate)
app.command("inconsistency")(evaluation.inconsistency)


def run(argv: Optional[list[str]] = None) -> int:
    """ Run one subcommand and return its exit status instead of exiting. """
    return typer.main.get_command(app).main(args=argv, prog_name="provhunt", standalone_mode=False)


if __name__ == "__main__":
    sys.exit(run())
