"""Command line interface.

Exit codes: 0 success, 2 contract/config error, 3 numerical failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import bench as bench_mod
from . import pipeline
from .errors import ContractError, DomainError, NumericalError


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ContractError, DomainError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
        except NumericalError as e:
            click.echo(f"numerical failure: {e}", err=True)
            sys.exit(3)

    return wrapper


def _load_config(path, **overrides):
    cfg = pipeline.PipelineConfig.from_json(path)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


@click.group()
@click.version_option(package_name="thermacal")
def main():
    """Spatio-thermal depth correction toolkit."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the rig RNG seed.")
@_exit_codes
def generate(config_path, seed):
    """Synthesize the capture dataset described by the config."""
    cfg = _load_config(config_path)
    if seed is not None:
        rig = cfg.rig if cfg.rig is not None else pipeline.RigConfig()
        cfg.rig = pipeline.RigConfig(**{**_rig_dict(rig), "rng_seed": seed})
    manifest = pipeline.cmd_generate(cfg)
    click.echo(
        f"wrote {len(manifest.entries)} capture pairs to {manifest.root} "
        f"(seed {manifest.seed})"
    )


def _rig_dict(rig):
    from dataclasses import asdict

    d = asdict(rig)
    d["positions"] = tuple(d["positions"])
    return d


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--target-mode", type=click.Choice(pipeline.TARGET_MODES), default=None)
@_exit_codes
def train(config_path, target_mode):
    """Assemble training data, tune hyperparameters, fit, and save the model."""
    cfg = _load_config(config_path, target_mode=target_mode)
    res = pipeline.cmd_train(cfg)
    h = res.model.hyper
    click.echo(f"training samples: {res.n_train}")
    click.echo(f"nlml: {res.nlml_init:.3f} -> {res.nlml_final:.3f} ({res.iterations} iterations)")
    click.echo(
        f"fitted: w=[{h.w[0]:.4g}, {h.w[1]:.4g}, {h.w[2]:.4g}, {h.w[3]:.4g}] "
        f"sigma_s={h.sigma_s:.4g} sigma_y={h.sigma_y:.4g}"
    )
    click.echo(f"model written to {cfg.model_path}")
    if res.warning:
        click.echo(f"warning: {res.warning}", err=True)
        sys.exit(3)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--position", type=float, required=True, help="Target distance, meters.")
@click.option("--temp", type=float, required=True, help="Capture temperature, Celsius.")
@click.option("--chunk", type=int, default=None)
@_exit_codes
def correct(config_path, position, temp, chunk):
    """Correct one capture; writes corrected and confidence maps."""
    cfg = _load_config(config_path, chunk=chunk)
    corrected_path, confidence_path = pipeline.cmd_correct(cfg, position, temp)
    click.echo(f"corrected map:  {corrected_path}")
    click.echo(f"confidence map: {confidence_path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--paper-protocol", is_flag=True, help="Score every non-reference capture (in-sample).")
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None)
@_exit_codes
def evaluate(config_path, paper_protocol, report_path):
    """RMSE before/after correction over the evaluation captures."""
    cfg = _load_config(
        config_path, report_path=Path(report_path) if report_path else None
    )
    if paper_protocol:
        cfg.protocol = "paper"
    report = pipeline.cmd_evaluate(cfg)
    click.echo(pipeline.render_report(report))
    if cfg.report_path is not None:
        click.echo(f"report written to {cfg.report_path}")


@main.command(name="bench")
@click.option("--mode", type=click.Choice(["kernel", "pipeline"]), required=True)
@click.option("--json", "json_path", type=click.Path(dir_okay=False), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--n", "n_train", type=int, default=5000, help="Training points (kernel mode).")
@click.option("--m", "n_query", type=int, default=307200, help="Query points (kernel mode).")
@click.option("--trials", type=int, default=5)
@click.option("--chunks", default="4096,16384", help="Chunk sizes (pipeline mode).")
@_exit_codes
def bench_cmd(mode, json_path, config_path, n_train, n_query, trials, chunks):
    """Performance benchmarks with output-equivalence checks."""
    if mode == "kernel":
        naive, fast = bench_mod.bench_kernel(n_train, n_query, trials=trials)
        reports = [naive, fast]
        speedup = naive.time_s / fast.time_s if fast.time_s > 0 else float("inf")
        footer = f"speedup (naive / fast): {speedup:.1f}x"
    else:
        if config_path is None:
            raise ContractError("pipeline mode needs --config")
        cfg = _load_config(config_path)
        try:
            sizes = tuple(int(c) for c in chunks.split(","))
        except ValueError:
            raise ContractError(f"--chunks must be comma-separated integers, got {chunks!r}") from None
        reports = bench_mod.bench_pipeline(
            cfg.dataset_dir, cfg.model_path, chunk_sizes=sizes, trials=trials
        )
        footer = "all variants output-equivalent"
    for r in reports:
        click.echo(
            f"{r.variant:36s} M={r.frame_size:7d} N={r.n_train:5d} "
            f"{r.time_s:9.4f} s/frame {r.fps:8.3f} fps  {r.note}"
        )
    click.echo(footer)
    if json_path:
        with open(json_path, "w") as f:
            json.dump([r.to_dict() for r in reports], f, indent=2, sort_keys=True)
        click.echo(f"json written to {json_path}")


if __name__ == "__main__":
    main()
