"""Command-line entry point wrapping the experiment pipeline stages."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from .config import ExperimentConfig, load_config
from .pipeline import (
    ExperimentPaths,
    run_all,
    run_ablation,
    run_sample,
    run_stage,
)


def _load(config_path, seed, out):
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=seed)
    if out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(out))
    return cfg, ExperimentPaths.at(cfg.out_dir)


def _fail(stage: str, exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc), "stage": stage}
    click.echo(json.dumps(payload, sort_keys=True), err=True)
    sys.exit(1)


def _stage_command(stage: str):
    @click.command(name=stage, help=f"Run the {stage} stage.")
    @click.option("--config", "config_path", type=click.Path(exists=True), default=None)
    @click.option("--seed", type=int, default=None, help="Override the master seed.")
    @click.option("--out", type=click.Path(), default=None, help="Override the output directory.")
    @click.option("--resume", is_flag=True, help="Skip if the stage manifest is still valid.")
    def cmd(config_path, seed, out, resume):
        cfg, paths = _load(config_path, seed, out)
        try:
            run_stage(stage, cfg, paths, resume=resume)
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            _fail(stage, exc)
        click.echo(f"{stage}: done ({paths.stage_dir(stage)})")

    return cmd


@click.group()
def main():
    """Synthetic nodule progression benchmark pipeline."""


for _stage in ("generate-data", "train-vae", "train-uncond", "train-cond"):
    main.add_command(_stage_command(_stage))


@main.command(help="Run the evaluation stage (metrics, traces, projections).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--k", type=int, default=None, help="Override the number of evaluation runs.")
@click.option("--out", type=click.Path(), default=None, help="Override the output directory.")
@click.option("--resume", is_flag=True)
def evaluate(config_path, seed, k, out, resume):
    cfg, paths = _load(config_path, seed, out)
    if k is not None:
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, k_runs=k))
        paths = ExperimentPaths.at(cfg.out_dir)
    try:
        run_stage("evaluate", cfg, paths, resume=resume)
    except Exception as exc:  # noqa: BLE001
        _fail("evaluate", exc)
    click.echo(f"evaluate: done ({paths.stage_dir('evaluate')})")


@main.command(help="Sample predicted follow-ups for test records.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, help="Run seed for the terminal noise.")
@click.option("--out", type=click.Path(), default=None, help="Directory for the PNG outputs.")
@click.option("--limit", type=int, default=None, help="Only sample the first N test records.")
def sample(config_path, seed, out, limit):
    cfg, paths = _load(config_path, None, None)
    target = Path(out) if out else paths.root / "samples"
    try:
        written = run_sample(cfg, paths, seed=seed, out_dir=target, limit=limit)
    except Exception as exc:  # noqa: BLE001
        _fail("sample", exc)
    click.echo(f"sample: wrote {len(written)} images to {target}")


@main.command(help="Run the full pipeline twice: configured vs zeroed alignment.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--resume", is_flag=True)
def ablation(config_path, seed, out, resume):
    cfg, paths = _load(config_path, seed, out)
    try:
        comparison = run_ablation(cfg, paths.root, resume=resume)
    except Exception as exc:  # noqa: BLE001
        _fail("ablation", exc)
    click.echo(json.dumps(comparison["delta"], sort_keys=True))


@main.command(name="all", help="Run every stage in order.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--resume", is_flag=True)
def run_all_cmd(config_path, seed, out, resume):
    cfg, paths = _load(config_path, seed, out)
    try:
        run_all(cfg, paths, resume=resume)
    except Exception as exc:  # noqa: BLE001
        _fail("all", exc)
    click.echo(f"all: done ({paths.root})")


if __name__ == "__main__":
    main()
