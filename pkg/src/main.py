"""
Command-line front end for SpikingCSINet.
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

import click

try:
    from .commands import CodecCommands
    from .config import PROFILES, get_app_settings, load_run_config, setup_logging
    from .errors import SpikingCSINetError
except ImportError:
    # Handle direct execution
    import os
    sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
    from commands import CodecCommands
    from config import PROFILES, get_app_settings, load_run_config, setup_logging
    from errors import SpikingCSINetError

logger = logging.getLogger(__name__)

PATH = click.Path(path_type=Path)


def exit_on_error(func: Callable) -> Callable:
    """Map the error hierarchy to process exit codes."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SpikingCSINetError as e:
            logger.error(str(e))
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
        except KeyboardInterrupt:
            logger.info("Stopped by user")
            sys.exit(1)
        except OSError as e:
            logger.error(f"I/O failure: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
    return wrapper


def config_options(func: Callable) -> Callable:
    func = click.option("--seed", type=int, default=None, help="Seed (overrides the config file)")(func)
    func = click.option(
        "--profile",
        type=click.Choice(sorted(PROFILES)),
        default=None,
        help="Named profile the config file is layered over",
    )(func)
    func = click.option("--config", "config_path", type=PATH, default=None, help="key = value config file")(func)
    return func


@click.group()
@click.option(
    "--log-level",
    default=None,
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]),
    help="Logging level (overrides environment variable)",
)
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str]) -> None:
    """SpikingCSINet: spiking CSI feedback codec with progressive residual refinement."""
    settings = get_app_settings()
    setup_logging(log_level or settings.log_level)
    ctx.obj = CodecCommands(settings)


@cli.command("gen-data")
@config_options
@click.option("--out", type=PATH, required=True, help="CSIF file to write")
@click.option("--count", type=int, default=None, help="Number of samples (overrides sample_count)")
@click.pass_obj
@exit_on_error
def gen_data(commands: CodecCommands, config_path, profile, seed, out, count) -> None:
    """Generate a synthetic sparse-channel dataset."""
    run = load_run_config(config_path, profile, seed)
    ds = commands.gen_data(run, out, count)
    click.echo(f"wrote {len(ds)} samples to {out}")


@cli.command()
@click.option("--source", type=PATH, required=True, help=".npy array shaped (n, 2, N_s, N_t)")
@click.option("--out", type=PATH, required=True, help="CSIF file to write")
@click.option("--input-scale", type=float, default=25.0, show_default=True)
@click.option("--no-scale", is_flag=True, default=False, help="Values are already scaled")
@click.pass_obj
@exit_on_error
def convert(commands: CodecCommands, source, out, input_scale, no_scale) -> None:
    """Import externally generated angle-delay samples."""
    ds = commands.convert(source, out, input_scale=input_scale, rescale=not no_scale)
    click.echo(f"wrote {len(ds)} samples to {out}")


@cli.command()
@config_options
@click.option("--data", type=PATH, required=True, help="Training CSIF file")
@click.option("--out", type=PATH, required=True, help="Checkpoint to write")
@click.option("--metrics", "metrics_path", type=PATH, default=None, help="Epoch CSV (default <out>.metrics.csv)")
@click.option("--val-data", type=PATH, default=None, help="Validation CSIF file")
@click.option("--checkpoint", "resume", type=PATH, default=None, help="Checkpoint to resume from")
@click.option("--stop-after", type=int, default=None, help="Stop after N epochs of this call; resume later with --checkpoint")
@click.pass_obj
@exit_on_error
def train(
    commands: CodecCommands, config_path, profile, seed, data, out, metrics_path, val_data, resume, stop_after
) -> None:
    """Train the codec with BPTT."""
    run = load_run_config(config_path, profile, seed)
    history = commands.train(
        run, data, out, metrics_path=metrics_path, val_data=val_data, resume=resume, stop_after=stop_after
    )
    if history:
        click.echo(f"final NMSE after epoch {history[-1].epoch + 1}: {history[-1].step_nmse_db[-1]:.4f} dB")
    click.echo(f"checkpoint written to {out}")


@cli.command("eval")
@click.option("--checkpoint", type=PATH, required=True)
@click.option("--data", type=PATH, required=True)
@click.pass_obj
@exit_on_error
def eval_command(commands: CodecCommands, checkpoint, data) -> None:
    """Report per-step and final NMSE, decoded from the packed codeword."""
    report = commands.evaluate(checkpoint, data)
    click.echo(report.to_text())


@cli.command()
@config_options
@click.option("--checkpoint", type=PATH, required=True)
@click.option("--data", type=PATH, required=True)
@click.option("--out", type=PATH, required=True, help="Report prefix; writes <out>.csv and <out>.txt")
@click.option("--limit", type=int, default=None, help="Audit only the first N samples")
@click.pass_obj
@exit_on_error
def energy(commands: CodecCommands, config_path, profile, seed, checkpoint, data, out, limit) -> None:
    """Measure firing rates and report MAC/AC energy."""
    run = load_run_config(config_path, profile, seed)
    report = commands.energy(checkpoint, data, out, energy_model=run.energy, limit=limit)
    click.echo(report.to_text(), nl=False)
    click.echo(f"total: {report.total_joules * 1e6:.4f} uJ")


@cli.command()
@config_options
@click.option("--data", type=PATH, required=True, help="Training CSIF file")
@click.option("--test-data", type=PATH, required=True, help="CSIF file NMSE and firing rates are measured on")
@click.option("--out", type=PATH, required=True, help="Sweep CSV to write")
@click.option("--cr", "cr_values", type=int, multiple=True, help="Compression ratio; repeat for several (default: config)")
@click.option("--t-steps", "t_values", type=int, multiple=True, help="Time steps; repeat for several (default: config)")
@click.option("--no-ablation", is_flag=True, default=False, help="Skip the no-PR model at each point")
@click.option("--limit", type=int, default=None, help="Audit only the first N test samples")
@click.pass_obj
@exit_on_error
def sweep(
    commands: CodecCommands, config_path, profile, seed, data, test_data, out, cr_values, t_values, no_ablation, limit
) -> None:
    """Train and score one codec per CR x T point: final NMSE against link energy."""
    run = load_run_config(config_path, profile, seed)
    points = commands.sweep(
        run,
        data,
        test_data,
        out,
        cr_values=list(cr_values) or [run.system.cr],
        t_values=list(t_values) or [run.system.t_steps],
        ablation=not no_ablation,
        limit=limit,
    )
    for p in points:
        variant = "PR" if p.progressive else "no-PR"
        click.echo(
            f"CR={p.cr} T={p.t_steps} {variant}: {p.feedback_bits} bits, "
            f"{p.final_nmse_db:.4f} dB, {p.energy_uj:.4f} uJ"
        )
    click.echo(f"sweep written to {out}")


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
