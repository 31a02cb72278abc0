"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""
from __future__ import annotations

import json
import logging
import sys

import click

from . import pipeline
from .config import load_config
from .errors import EventSveError

log = logging.getLogger("eventsve")


def _execute(ctx, stages):
    opts = ctx.obj
    try:
        cfg = load_config(opts["config"], seed=opts["seed"], threads=opts["threads"])
        if stages == "all":
            report = pipeline.run_all(cfg, opts["out"])
        else:
            report = None
            for stage in stages:
                report = pipeline.run_stage(cfg, opts["out"], stage, report)
    except EventSveError as exc:
        click.echo(f"error: {exc}", err=True)
        ctx.exit(exc.exit_code)
        return
    click.echo(json.dumps(pipeline._to_builtin(report.to_dict()), indent=2, sort_keys=True))


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None, help="YAML pipeline config.")
@click.option("--out", "out", type=click.Path(file_okay=False), default="out", show_default=True,
              help="Artifact directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=None, help="Worker threads (does not change outputs).")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def main(ctx, config, out, seed, threads, verbose):
    """Event/SVE particle metrology pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config, "out": out, "seed": seed, "threads": threads}


def _stage_command(name, help_text):
    @main.command(name=name, help=help_text)
    @click.pass_context
    def cmd(ctx):
        _execute(ctx, (name,))

    return cmd


cmd_simulate = _stage_command("simulate", "Render SVE mosaics and stereo event streams of the scene.")
cmd_reconstruct = _stage_command("reconstruct", "Decode mosaics into four-exposure stacks.")
cmd_smoke = _stage_command("smoke", "Compute smoke-likelihood maps and region labels.")
cmd_fuse = _stage_command("fuse", "Fuse each exposure stack into an HDR image.")
cmd_extract = _stage_command("extract", "Extract gated particle observations from both event streams.")
cmd_measure = _stage_command("measure", "Match views, triangulate and size particles.")
cmd_report = _stage_command("report", "Aggregate stage reports and render the plots.")


@main.command(name="run")
@click.pass_context
def cmd_run(ctx):
    """All stages in order (simulating first when no recorded inputs are set)."""
    _execute(ctx, "all")


if __name__ == "__main__":  # pragma: no cover
    main()
