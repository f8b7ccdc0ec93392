"""
Run Artifacts

Writers for the files a run leaves in its output directory:

    report.csv / report.jsonl   one row per evaluated round
    ledger.csv                  round,uplink,downlink,d2d
    transcript.jsonl            every bus message without payload
    comm_summary.json           totals plus the full-table uplink baseline
    checkpoint.sdfe             server state
    config.resolved             every effective configuration value
"""

import csv
from pathlib import Path
from typing import Any, Iterable, Union

import orjson

from src.core.server import full_table_uplink, save_checkpoint
from src.federation.bus import CommLedger, Transcript
from src.federation.simulation import Experiment
from src.schema import LEDGER_COLUMNS, REPORT_COLUMNS, MetricsReport

REPORT_CSV = "report.csv"
REPORT_JSONL = "report.jsonl"
LEDGER_CSV = "ledger.csv"
TRANSCRIPT_JSONL = "transcript.jsonl"
COMM_SUMMARY = "comm_summary.json"
CHECKPOINT = "checkpoint.sdfe"
CONFIG_RESOLVED = "config.resolved"


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Union[str, Path], columns: Iterable[str], rows: Iterable[dict[str, Any]]) -> Path:
    path = Path(path)
    columns = list(columns)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
    return path


def write_jsonl(path: Union[str, Path], rows: Iterable[dict[str, Any]]) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        for row in rows:
            f.write(orjson.dumps(row) + b"\n")
    return path


def write_reports(out_dir: Path, reports: list[MetricsReport]) -> None:
    rows = [report.to_row() for report in reports]
    write_csv(out_dir / REPORT_CSV, REPORT_COLUMNS, rows)
    write_jsonl(out_dir / REPORT_JSONL, rows)


def write_ledger(out_dir: Path, ledger: CommLedger, last_round: int) -> Path:
    """Ledger rows for rounds 0..last_round; silent rounds are zeros"""
    rows = [ledger.row(r).to_dict() for r in range(last_round + 1)]
    return write_csv(out_dir / LEDGER_CSV, LEDGER_COLUMNS, rows)


def write_transcript(out_dir: Path, transcript: Transcript) -> Path:
    return write_jsonl(out_dir / TRANSCRIPT_JSONL, transcript.records)


def write_comm_summary(out_dir: Path, experiment: Experiment) -> Path:
    world = experiment.world
    totals = world.bus.ledger.totals()
    rounds = max(world.round, 1)
    devices = max(len(world.devices), 1)
    summary = {
        "rounds": world.round,
        "totals": totals,
        "uplink_per_device_round": totals["uplink"] / (rounds * devices),
        "full_table_uplink_per_device_round": full_table_uplink(
            world.dataset.num_items, world.server.dim
        ),
    }
    path = out_dir / COMM_SUMMARY
    path.write_bytes(orjson.dumps(summary, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return path


def write_run(out_dir: Union[str, Path], experiment: Experiment) -> Path:
    """Write every artifact of a finished experiment"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = experiment.world

    (out_dir / CONFIG_RESOLVED).write_text(experiment.config.to_resolved_text())
    write_reports(out_dir, experiment.reports)
    write_ledger(out_dir, world.bus.ledger, world.round)
    write_transcript(out_dir, world.bus.transcript)
    write_comm_summary(out_dir, experiment)

    table, registry, round_index = experiment.final_state()
    num_groups = len(world.assignment.groups) if world.assignment else experiment.config.resolved_groups
    save_checkpoint(out_dir / CHECKPOINT, table, registry, round_index, num_groups)
    return out_dir


def read_csv(path: Union[str, Path]) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
