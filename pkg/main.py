"""Main entry point for the CSI localizer pipeline."""

import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import click
import yaml
from pydantic import ValidationError

from src.config import RunConfig, config_summary, create_example_config, load_config, setup_logging
from src.errors import LocalizerError
from src.stages import PipelineOrchestrator

PIPELINE = (
    "synth", "preprocess", "train-cnn", "extract-features", "gen-traj",
    "train-lstm", "evaluate", "report",
)

EXIT_CONFIG = 2
EXIT_DATA = 3


def _load(options: Dict[str, Any]) -> RunConfig:
    return load_config(
        options["config"],
        options["overrides"],
        profile=options["profile"],
        grid=options["grid"],
        seed=options["seed"],
        workdir=options["workdir"],
        force=True if options["force"] else None,
    )


def _guarded(action: Callable[[], None]) -> None:
    """Run ``action`` and turn failures into a one-line diagnostic and an exit code."""
    try:
        action()
    except LocalizerError as e:
        click.echo(f"❌ {type(e).__name__}: {e}", err=True)
        sys.exit(e.exit_code)
    except ValidationError as e:
        click.echo(f"❌ Configuration validation failed: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except yaml.YAMLError as e:
        click.echo(f"❌ Configuration file is not valid YAML: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except FileNotFoundError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(EXIT_DATA)
    except Exception as e:
        logging.getLogger("csi-localizer").exception(f"❌ Unexpected failure: {e}")
        click.echo(f"❌ Unexpected failure: {e}", err=True)
        sys.exit(1)


def _run_stages(ctx: click.Context, stages: Tuple[str, ...]) -> None:
    def action() -> None:
        config = _load(ctx.obj)
        setup_logging(config.logging, stages[0] if len(stages) == 1 else "pipeline")
        orchestrator = PipelineOrchestrator(config)
        for stage in stages:
            outputs = orchestrator.run(stage)
            click.echo(f"✅ {stage}: wrote {len(outputs)} file(s) under {orchestrator.paths.root}")

    _guarded(action)


@click.group()
@click.option('--config', '-c', type=click.Path(path_type=Path), help='Path to a flat YAML run configuration')
@click.option('--profile', type=click.Choice(['nic', 'phone']), help='Device profile (sets image dims and defaults)')
@click.option('--grid', type=float, help='RP grid spacing in metres')
@click.option('--seed', type=int, help='Master seed for every random stream')
@click.option('--workdir', type=click.Path(path_type=Path), help='Run directory for all artifacts')
@click.option('--force', is_flag=True, help='Overwrite existing non-empty outputs')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE', help='Override any config key (repeatable)')
@click.pass_context
def main(ctx: click.Context, config: Optional[Path], profile: Optional[str], grid: Optional[float],
         seed: Optional[int], workdir: Optional[Path], force: bool, overrides: Tuple[str, ...]):
    """CSI localizer - CNN feature quantifier plus LSTM tracker over WiFi CSI images."""
    ctx.obj = {
        "config": str(config) if config else None,
        "profile": profile,
        "grid": grid,
        "seed": seed,
        "workdir": str(workdir) if workdir else None,
        "force": force,
        "overrides": overrides,
    }


def _stage_command(name: str, help_text: str) -> None:
    @main.command(name=name, help=help_text)
    @click.pass_context
    def command(ctx: click.Context) -> None:
        _run_stages(ctx, (name,))


_stage_command("synth", "Simulate the site, the RP database and one test route per scheduled day.")
_stage_command("preprocess", "Median-filter, normalize and power-rescale the database and routes.")
_stage_command("train-cnn", "Train the CNN quantifier on the preprocessed database.")
_stage_command("extract-features", "Write the CNN feature bank for every training image.")
_stage_command("gen-traj", "Generate training and validation trajectories over the RP grid.")
_stage_command("train-lstm", "Train the LSTM tracker on the trajectory cache.")
_stage_command("evaluate", "Stream every test route through the tracker and the CNN-only baseline.")
_stage_command("ambiguity", "Count ambiguous RPs for raw images, CNN features and feature sequences.")
_stage_command("report", "Tabulate both methods over every test route.")
_stage_command("correlation", "Temporal, spatial and feature correlation analyses.")


@main.command(name="run-all")
@click.pass_context
def run_all(ctx: click.Context) -> None:
    """Run synth through report in order."""
    _run_stages(ctx, PIPELINE)


@main.command(name="validate-config")
@click.pass_context
def validate_config(ctx: click.Context) -> None:
    """Validate the configuration without running any stage."""
    def action() -> None:
        summary = config_summary(_load(ctx.obj))
        click.echo("✅ Configuration is valid!")
        for key, value in summary.items():
            click.echo(f"{key}: {value}")

    _guarded(action)


@main.command(name="create-example")
@click.argument('output', type=click.Path(path_type=Path))
@click.option('--profile', 'example_profile', type=click.Choice(['nic', 'phone']), default='nic')
def create_example(output: Path, example_profile: str) -> None:
    """Write an example configuration with every key at its profile default."""
    try:
        create_example_config(str(output), example_profile)
        click.echo(f"Created example configuration: {output}")
    except Exception as e:
        click.echo(f"Failed to create example configuration: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
