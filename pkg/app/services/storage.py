import csv
import json
from pathlib import Path

from app.core import EventLog

RUNS_DIR = Path("runs")


def prepare_out_dir(out_dir=None) -> Path:
    """Create (if needed) and return the directory a run writes into."""
    path = Path(out_dir) if out_dir else RUNS_DIR
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_summary(out_dir: Path, summary: dict) -> Path:
    path = out_dir / "summary.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_events(out_dir: Path, events: EventLog) -> Path:
    """JSON Lines, keys sorted so identical runs give identical bytes."""
    path = out_dir / "events.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for event in events.events:
            f.write(json.dumps(event, sort_keys=True, separators=(",", ":")))
            f.write("\n")
    return path


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_done_shards(out_dir: Path, done_shards: dict[int, int]) -> Path:
    rows = [[w, c] for w, c in sorted(done_shards.items())]
    return write_csv(out_dir / "done_shards.csv", ["worker", "done_shards"], rows)


def write_trace(out_dir: Path, trace: list[tuple[float, str, float, int]]) -> Path:
    """Per-iteration BPT and batch size of every worker."""
    return write_csv(out_dir / "trace.csv", ["t", "node", "bpt", "batch_size"], trace)
