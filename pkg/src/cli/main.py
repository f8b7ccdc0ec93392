"""
Command-Line Interface

    sdfe ingest   PATH --format F --out DIR
    sdfe run      [--config FILE] [flags] --out DIR
    sdfe sweep    PARAM VALUES [--seeds S] --out DIR
    sdfe ablate   [--seeds S] --out DIR
    sdfe eval     CHECKPOINT [--config FILE] [flags]
    sdfe report   CSV... --out FILE

Exit codes: 0 success, 1 run failure, 2 invalid configuration or usage.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional

import click
import orjson
import structlog
from tqdm import tqdm

from src.cli.artifacts import read_csv, write_csv, write_run
from src.core.metrics import evaluate_tables
from src.core.server import load_checkpoint
from src.errors import ConfigError, SimulatorError
from src.federation.simulation import Experiment, load_dataset
from src.ingestion import filter_and_split, ingest, write_idmap, write_interactions
from src.schema import REPORT_COLUMNS, ExperimentConfig, load_config

logger = structlog.get_logger(__name__)

SWEEP_PARAMS = {
    "fake_nodes": "fake_items",
    "groups": "groups",
    "layers": "layers",
    "neg_count": "neg_count",
}

EXIT_FAILURE = 1
EXIT_USAGE = 2


# =============================================================================
# Logging
# =============================================================================


def configure_logging(verbose: bool = False, json: bool = False) -> None:
    """Configure structlog once for the process (stderr)"""
    level = logging.DEBUG if verbose else logging.INFO
    renderer = structlog.processors.JSONRenderer() if json else structlog.dev.ConsoleRenderer()
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


# =============================================================================
# Shared Options
# =============================================================================


def experiment_options(fn: Callable) -> Callable:
    """Flags accepted by every command that builds an ExperimentConfig"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key=value config file"),
        click.option("--dataset", "dataset_path", help="Interaction file"),
        click.option("--format", "dataset_format", type=click.Choice(["movielens-dat", "tsv", "synthetic"])),
        click.option("--synthetic", is_flag=True, default=False, help="Use the block-community corpus"),
        click.option("--min-interactions", type=int),
        click.option("--split-mode", type=click.Choice(["per_user", "global"])),
        click.option("--dim", "embedding_dim", type=int),
        click.option("--layers", type=int),
        click.option("--groups", type=int),
        click.option("--fake-items", type=int),
        click.option("--neg-count", type=int),
        click.option("--lr", type=float),
        click.option("--weight-decay", type=float),
        click.option("--local-epochs", type=int),
        click.option("--delta", type=float),
        click.option("--ldp-lambda", type=float),
        click.option("--rounds", type=int),
        click.option("--sample-frac", type=float),
        click.option("--recluster-every", type=int),
        click.option("--ego-upload-every", type=int),
        click.option("--eval-every", type=int),
        click.option("--k", type=int),
        click.option("--item-topk-mode/--no-item-topk-mode", default=None),
        click.option("--select-on-valid/--no-select-on-valid", default=None),
        click.option("--early-stop-patience", type=int),
        click.option("--seed", type=int),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def build_config(config_path: Optional[str], synthetic: bool, **flags: Any) -> ExperimentConfig:
    """Merge file and flags; exit 2 listing every violation"""
    if synthetic:
        flags["dataset_format"] = "synthetic"
    try:
        return load_config(config_path, flags)
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_USAGE)


def parse_list(text: str, cast: Callable[[str], Any] = int) -> list[Any]:
    try:
        return [cast(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list: {text!r}")


def execute(config: ExperimentConfig, out_dir: Path, quiet: bool = True) -> Experiment:
    """Run one experiment and write its artifacts"""
    experiment = Experiment(config)
    progress = tqdm(
        total=config.rounds // config.eval_every + 1,
        desc=f"seed={config.seed}",
        disable=quiet or not sys.stderr.isatty(),
        file=sys.stderr,
    )
    with progress:
        for report in experiment.run():
            progress.update(1)
            progress.set_postfix(recall=f"{report.recall_at_k:.4f}", ndcg=f"{report.ndcg_at_k:.4f}")
    write_run(out_dir, experiment)
    return experiment


# =============================================================================
# Commands
# =============================================================================


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.option("--json-logs", is_flag=True, help="JSON log lines")
def cli(verbose: bool, json_logs: bool):
    """Semi-decentralized federated ego-graph recommendation simulator"""
    configure_logging(verbose=verbose, json=json_logs)


@cli.command("ingest")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "dataset_format", type=click.Choice(["movielens-dat", "tsv"]), default="movielens-dat")
@click.option("--min-interactions", type=int, default=None)
@click.option("--split-mode", type=click.Choice(["per_user", "global"]), default="per_user")
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def ingest_cmd(path, dataset_format, min_interactions, split_mode, seed, out_dir):
    """Filter and remap PATH; write interactions.tsv and idmap.tsv"""
    config = build_config(
        None,
        False,
        dataset_path=path,
        dataset_format=dataset_format,
        min_interactions=min_interactions,
        split_mode=split_mode,
        seed=seed,
    )
    try:
        dataset = filter_and_split(
            ingest(path, dataset_format),
            config.resolved_min_interactions,
            ratios=config.ratios,
            seed=seed,
            split_mode=split_mode,
        )
    except SimulatorError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_FAILURE)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(dataset, out / "interactions.tsv")
    write_idmap(dataset, out / "idmap.tsv")
    for key, value in dataset.stats().items():
        click.echo(f"{key}\t{value}")


@cli.command("run")
@experiment_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--quiet", is_flag=True, help="No progress bar")
def run_cmd(config_path, synthetic, out_dir, quiet, **flags):
    """Run one experiment and write its artifacts to --out"""
    config = build_config(config_path, synthetic, **flags)
    try:
        experiment = execute(config, Path(out_dir), quiet=quiet)
    except (SimulatorError, OSError) as e:
        logger.error("Run failed", error=str(e))
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_FAILURE)

    final = experiment.reports[-1]
    click.echo(f"round={final.round} recall@{final.k}={final.recall_at_k:.4f} ndcg@{final.k}={final.ndcg_at_k:.4f}")


@cli.command("sweep")
@click.argument("param", type=str)
@click.argument("values", type=str)
@experiment_options
@click.option("--seeds", default=None, help="Comma-separated seeds (default: --seed)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def sweep_cmd(param, values, config_path, synthetic, seeds, out_dir, **flags):
    """Run the experiment for every VALUE of PARAM and every seed"""
    if param not in SWEEP_PARAMS:
        click.echo(f"Error: unknown sweep parameter {param!r}; valid: {', '.join(SWEEP_PARAMS)}", err=True)
        sys.exit(EXIT_USAGE)
    base = build_config(config_path, synthetic, **flags)
    seed_list = parse_list(seeds) if seeds else [base.seed]
    value_list = parse_list(values)
    field = SWEEP_PARAMS[param]

    out = Path(out_dir)
    rows: list[dict[str, Any]] = []
    failures = 0
    for value in value_list:
        for seed in seed_list:
            cell_dir = out / f"{param}={value}" / f"seed={seed}"
            try:
                config = ExperimentConfig(**{**base.model_dump(), field: value, "seed": seed})
                experiment = execute(config, cell_dir)
            except Exception as e:
                failures += 1
                logger.error("Sweep cell failed", param=param, value=value, seed=seed, error=str(e))
                click.echo(f"FAILED {param}={value} seed={seed}: {e}", err=True)
                continue
            rows.append({"param_value": value, "seed": seed, **experiment.reports[-1].to_row()})

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", ("param_value", "seed", *REPORT_COLUMNS), rows)
    click.echo(f"{len(rows)} cells completed, {failures} failed")
    if failures:
        sys.exit(EXIT_FAILURE)


@cli.command("ablate")
@experiment_options
@click.option("--seeds", default=None, help="Comma-separated seeds (default: --seed)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def ablate_cmd(config_path, synthetic, seeds, out_dir, **flags):
    """Paired runs with and without fake common items"""
    base = build_config(config_path, synthetic, **flags)
    if base.fake_items == 0:
        logger.warning("Ablation with fake_items=0 compares identical settings")
    seed_list = parse_list(seeds) if seeds else [base.seed]

    out = Path(out_dir)
    rows: list[dict[str, Any]] = []
    try:
        for seed in seed_list:
            recalls = {}
            for label, fake_items in (("with", base.fake_items), ("without", 0)):
                config = ExperimentConfig(**{**base.model_dump(), "fake_items": fake_items, "seed": seed})
                experiment = execute(config, out / f"seed={seed}" / label)
                recalls[label] = experiment.reports[-1].recall_at_k
            rows.append(
                {
                    "seed": seed,
                    "recall_with": recalls["with"],
                    "recall_without": recalls["without"],
                    "delta": recalls["with"] - recalls["without"],
                }
            )
    except SimulatorError as e:
        logger.error("Ablation failed", error=str(e))
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_FAILURE)

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ("seed", "recall_with", "recall_without", "delta"), rows)
    for row in rows:
        click.echo(f"seed={row['seed']} delta={row['delta']:+.4f}")


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@experiment_options
@click.option("--split", type=click.Choice(["test", "valid"]), default="test")
def eval_cmd(checkpoint, config_path, synthetic, split, **flags):
    """Re-evaluate a checkpoint against the configured dataset"""
    config = build_config(config_path, synthetic, **flags)
    try:
        dataset = load_dataset(config)
        table, registry, header = load_checkpoint(checkpoint)
    except (SimulatorError, ValueError, OSError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_FAILURE)

    if (header["N"], header["M"]) != (dataset.num_users, dataset.num_items):
        click.echo(
            f"Error: checkpoint has N={header['N']}, M={header['M']}; "
            f"dataset has N={dataset.num_users}, M={dataset.num_items}",
            err=True,
        )
        sys.exit(EXIT_FAILURE)

    report = evaluate_tables(dataset, registry, table, config.k, split=split, round_index=header["round"])
    row = {key: value for key, value in report.to_row().items() if key in ("round", "k", "recall", "ndcg")}
    click.echo(orjson.dumps({**row, "split": split, "users": report.num_users}).decode())


@cli.command("report")
@click.argument("csv_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
def report_cmd(csv_paths, out_path):
    """Merge report CSVs into one file with a source column"""
    rows: list[dict[str, Any]] = []
    columns: list[str] = ["source"]
    for path in csv_paths:
        for row in read_csv(path):
            for key in row:
                if key not in columns:
                    columns.append(key)
            rows.append({"source": path, **row})
    write_csv(out_path, columns, rows)
    click.echo(f"{len(rows)} rows from {len(csv_paths)} files -> {out_path}")


if __name__ == "__main__":
    cli()
