# -*- coding: UTF-8 -*-
"""
Command-line surface

    rmaff-ps [--seed N] [--precision f32|f64] [--threads N] [--deterministic] COMMAND ...

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

import functools
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from config import PS_DETERMINISTIC, PS_LOG_LEVEL, PS_THREADS

from . import pipeline
from .dataset_io import parse_image_subset
from .errors import InputError
from .settings import VARIANTS, ToolkitConfig, load_config, tiny_config

logger = logging.getLogger(__name__)

console = Console()
app = typer.Typer(
    name="rmaff-ps",
    help="Photometric stereo: render, solve, train, evaluate",
    add_completion=False,
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)


class Precision(str, Enum):
    f32 = "f32"
    f64 = "f64"


class Method(str, Enum):
    l2 = "l2"
    rmaff = "rmaff"


@dataclass
class RunOptions:
    seed: Optional[int] = None
    precision: Optional[str] = None
    threads: int = PS_THREADS
    deterministic: bool = PS_DETERMINISTIC


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _options(ctx: typer.Context) -> RunOptions:
    return ctx.obj if isinstance(ctx.obj, RunOptions) else RunOptions()


def resolve_config(path: Optional[Path], opts: RunOptions, default: Optional[ToolkitConfig] = None) -> ToolkitConfig:
    """Config document (or default) with command-line overrides applied"""
    cfg = load_config(path) if path is not None else (default or ToolkitConfig())
    if opts.seed is not None:
        cfg = cfg.model_copy(update={"seed": opts.seed, "train": cfg.train.model_copy(update={"seed": opts.seed})})
    if opts.precision is not None:
        cfg = cfg.model_copy(
            update={
                "network": cfg.network.model_copy(update={"precision": opts.precision}),
                "train": cfg.train.model_copy(update={"precision": opts.precision}),
            }
        )
    return cfg


def guarded(func):
    """Map toolkit errors to exit codes: 1 for invalid input, 2 for anything else"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (typer.Exit, click.exceptions.ClickException):
            raise
        except (InputError, ValidationError) as e:
            logger.error("Invalid input: %s", e)
            raise typer.Exit(code=1) from e
        except Exception as e:
            logger.error("Failed: %s", e, exc_info=logger.isEnabledFor(logging.DEBUG))
            raise typer.Exit(code=2) from e

    return wrapper


def _int_list(text: str, label: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise InputError("Bad {} list {!r}".format(label, text)) from e
    if not values:
        raise InputError("Empty {} list".format(label))
    return values


@app.callback()
def main_options(
    ctx: typer.Context,
    seed: Optional[int] = typer.Option(None, "--seed", help="Root seed for every random stream"),
    precision: Optional[Precision] = typer.Option(None, "--precision", help="Network precision"),
    threads: int = typer.Option(PS_THREADS, "--threads", min=1, help="Worker threads"),
    deterministic: bool = typer.Option(PS_DETERMINISTIC, "--deterministic/--no-deterministic", help="Serial, reproducible runs"),
    log_level: str = typer.Option(PS_LOG_LEVEL, "--log-level", help="Logging level"),
):
    setup_logging(log_level)
    ctx.obj = RunOptions(seed, precision.value if precision else None, threads, deterministic)


@app.command()
@guarded
def render(
    ctx: typer.Context,
    config: Path = typer.Argument(..., help="Config document (JSON)"),
    out_dir: Path = typer.Argument(..., help="Directory to write scene datasets into"),
):
    """Render the configured synthetic scenes as dataset directories"""
    opts = _options(ctx)
    cfg = resolve_config(config, opts)
    dirs = pipeline.render_to_dir(cfg, out_dir, 1 if opts.deterministic else opts.threads)
    typer.echo("Rendered {} scenes into {}".format(len(dirs), out_dir))


@app.command()
@guarded
def solve(
    ctx: typer.Context,
    dataset_dir: Path = typer.Argument(..., help="Dataset directory"),
    out: Path = typer.Argument(..., help="Output normal map (.png or .pfm)"),
    method: Method = typer.Option(Method.l2, "--method", help="Least squares or the network"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Checkpoint (stem, manifest or directory with BEST)"),
    images: Optional[str] = typer.Option(None, "--images", help="Image subset, e.g. 20:96 or 0,2,5"),
    config: Optional[Path] = typer.Option(None, "--config", help="Config document for solver options"),
):
    """Estimate a normal map for one dataset"""
    opts = _options(ctx)
    cfg = resolve_config(config, opts)
    normals, seconds = pipeline.solve_dataset(
        dataset_dir, out, method.value, checkpoint, parse_image_subset(images), cfg, opts.threads
    )
    typer.echo("Wrote {} ({} pixels)".format(out, int(normals.mask.sum())))


@app.command()
@guarded
def train(
    ctx: typer.Context,
    config: Path = typer.Argument(..., help="Config document (JSON)"),
    train_dir: Path = typer.Argument(..., help="Directory of training scenes"),
    out_dir: Path = typer.Argument(..., help="Checkpoint and log directory"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Continue from this checkpoint"),
):
    """Train RMAFF-PSN; the best epoch is recorded in <out_dir>/BEST"""
    opts = _options(ctx)
    cfg = resolve_config(config, opts)
    best = pipeline.train_from_dir(cfg, train_dir, out_dir, resume=resume, deterministic=opts.deterministic)
    typer.echo("Best epoch {}: validation MAE {:.4f}".format(best.epoch, best.val_mae))


@app.command("eval")
@guarded
def eval_command(
    pred: Path = typer.Argument(..., help="Predicted normal map (.png or .pfm)"),
    dataset_dir: Path = typer.Argument(..., help="Dataset directory with normal_gt.pfm"),
    out: Optional[Path] = typer.Option(None, "--out", help="Report directory (default: next to the prediction)"),
    max_degrees: float = typer.Option(90.0, "--max-degrees", help="Error saturating the colour table"),
):
    """Mean angular error of a prediction; writes report.tsv and error_map.png"""
    out_dir = out if out is not None else pred.parent / (pred.stem + "_eval")
    report = pipeline.evaluate_prediction(pred, dataset_dir, out_dir, max_degrees)
    typer.echo("MAE {:.4f} deg".format(report.mae))
    table = Table(title=report.name)
    for column in ("MAE", "p50", "p75", "p90", "pixels"):
        table.add_column(column, justify="right")
    table.add_row(*["{:.3f}".format(report.mae)] + ["{:.3f}".format(v) for v in report.percentiles.values()] + [str(report.pixels)])
    console.print(table)


@app.command()
@guarded
def ablate(
    ctx: typer.Context,
    config: Path = typer.Argument(..., help="Config document (JSON)"),
    train_dir: Path = typer.Argument(..., help="Directory of training scenes"),
    out_dir: Path = typer.Argument(..., help="Output directory, one subdirectory per variant"),
    test_dir: Optional[Path] = typer.Option(None, "--test-dir", help="Scenes to score (default: the validation split)"),
    variants: str = typer.Option(",".join(VARIANTS), "--variants", help="Comma-separated variant names"),
):
    """Train and score every network variant; prints a TSV table"""
    opts = _options(ctx)
    cfg = resolve_config(config, opts)
    names = [v.strip() for v in variants.split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown:
        raise InputError("Unknown variant {!r}; expected {}".format(unknown[0], ", ".join(VARIANTS)))
    table = pipeline.ablate(cfg, train_dir, out_dir, test_dir, names, opts.deterministic, opts.threads)
    typer.echo(table, nl=False)


@app.command()
@guarded
def gradcheck(
    ctx: typer.Context,
    config: Optional[Path] = typer.Argument(None, help="Config document (default: the tiny network)"),
    probes: int = typer.Option(4, "--probes", min=1, help="Entries checked per tensor"),
    network: bool = typer.Option(True, "--network/--no-network", help="Include the full-network check"),
):
    """Finite-difference check of every layer kind, the RMAFF module and the full network"""
    opts = _options(ctx)
    cfg = resolve_config(config, opts, default=tiny_config())
    results = pipeline.gradcheck(cfg, opts.seed if opts.seed is not None else cfg.seed, probes, network)
    table = Table(title="Gradient check (double precision)")
    table.add_column("check")
    table.add_column("max rel. error", justify="right")
    table.add_column("result")
    for label, report in results:
        table.add_row(label, "{:.3e}".format(report.max_error), "ok" if report.passed else "FAIL")
    console.print(table)
    worst = max(report.max_error for _, report in results)
    passed = all(report.passed for _, report in results)
    typer.echo("max relative error {:.3e} {}".format(worst, "PASS" if passed else "FAIL"))
    if not passed:
        raise typer.Exit(code=2)


@app.command()
@guarded
def sweep(
    ctx: typer.Context,
    dataset_dir: Path = typer.Argument(..., help="Dataset directory with ground truth"),
    method: Method = typer.Option(Method.l2, "--method"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    lights: str = typer.Option("6,24,64,96", "--lights", help="Image counts to test"),
    scales: str = typer.Option("1", "--scales", help="Integer downscale factors"),
    config: Optional[Path] = typer.Option(None, "--config"),
):
    """MAE against the number of input images and the test resolution"""
    opts = _options(ctx)
    cfg = resolve_config(config, opts)
    text = pipeline.sweep(
        dataset_dir, method.value, _int_list(lights, "light count"), _int_list(scales, "scale"), checkpoint, cfg, opts.threads
    )
    typer.echo(text, nl=False)


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command line; returns the exit code instead of exiting"""
    try:
        result = app(args=list(argv) if argv is not None else None, prog_name="rmaff-ps", standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 2
    return result if isinstance(result, int) else 0


def main() -> None:
    raise SystemExit(run_cli())
