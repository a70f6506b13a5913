from pathlib import Path

import click

from ris_estimation import harness
from ris_estimation.artifact import bundle_artifacts, verify_manifest
from ris_estimation.config import (
    EXPERIMENT_KINDS,
    ExperimentConfig,
    config_hash,
    load_config,
    with_overrides,
)


def _options(f):
    f = click.option(
        "--out-dir",
        type=click.Path(file_okay=False, path_type=Path),
        default=Path("artifacts"),
        show_default=True,
        help="Artifact directory shared by every stage",
    )(f)
    f = click.option(
        "--experiment",
        type=click.Choice(EXPERIMENT_KINDS),
        default=None,
        help="Override the experiment regime from the config file",
    )(f)
    f = click.option("--seed", type=int, default=None, help="Override the master seed")(f)
    f = click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False, path_type=Path),
        default=None,
        help="YAML experiment config (defaults apply to missing keys)",
    )(f)
    return f


def _config(config_path: Path | None, seed: int | None, experiment: str | None) -> ExperimentConfig:
    return with_overrides(load_config(config_path), seed=seed, experiment=experiment)


@click.group()
def main():
    """Simulate and evaluate RIS cascaded channel estimation."""


@main.command()
@_options
def generate(config_path, seed, experiment, out_dir):
    """Generate the train and test channel datasets."""
    config = _config(config_path, seed, experiment)
    out_dir.mkdir(parents=True, exist_ok=True)
    harness.stage_generate(config, out_dir)


@main.command("pretrain-gate")
@_options
def pretrain_gate(config_path, seed, experiment, out_dir):
    """Pretrain the region classifier and save it as a checkpoint."""
    harness.stage_pretrain(_config(config_path, seed, experiment), out_dir)


@main.command()
@_options
def train(config_path, seed, experiment, out_dir):
    """Train the experts and mapper with FedAvg."""
    harness.stage_train(_config(config_path, seed, experiment), out_dir)


@main.command("eval")
@_options
@click.option("--per-sample", is_flag=True, help="Write one result row per test sample")
def evaluate(config_path, seed, experiment, out_dir, per_sample):
    """Evaluate the trained estimator and the LS/MMSE baselines."""
    harness.stage_eval(_config(config_path, seed, experiment), out_dir, per_sample=per_sample)


@main.command()
@_options
@click.option("--sweep", is_flag=True, help="Sweep LS/MMSE over evaluation.pilot_sweep_q")
def baseline(config_path, seed, experiment, out_dir, sweep):
    """Evaluate LS and MMSE only."""
    harness.stage_baseline(_config(config_path, seed, experiment), out_dir, sweep=sweep)


@main.command()
@_options
def complexity(config_path, seed, experiment, out_dir):
    """Report per-inference MACs, analytic and instrumented."""
    config = _config(config_path, seed, experiment)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = harness.stage_complexity(config, out_dir)
    if any(row.macs != row.instrumented for row in rows):
        raise click.ClickException("Instrumented MAC count differs from the analytic count")


@main.command()
@_options
@click.option(
    "--bundle",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Also write a tar.gz of the artifacts (datasets excluded)",
)
def experiment(config_path, seed, experiment, out_dir, bundle):
    """Run the selected regime end to end."""
    config = _config(config_path, seed, experiment)
    out_dir.mkdir(parents=True, exist_ok=True)
    harness.run_experiment(config, out_dir)
    if bundle is not None:
        bundle_artifacts(out_dir, bundle)


@main.command()
@_options
def verify(config_path, seed, experiment, out_dir):
    """Re-hash the artifact directory against its manifest."""
    config = _config(config_path, seed, experiment)
    problems = verify_manifest(out_dir, config_hash(config))
    for problem in problems:
        click.echo(f"  ❌ {problem.path}: {problem.reason}", err=True)
    if problems:
        raise click.ClickException(f"{len(problems)} artifact(s) do not match the manifest")
    click.echo("  ✅ All artifacts match the manifest")


if __name__ == "__main__":
    main()
