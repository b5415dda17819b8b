"""Scenario runs, sweeps and preset listings shared by the CLI and tests."""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from app.config import PresetCatalog, ScenarioConfig, apply_overrides, dump_scenario, parse_scenario
from app.services import storage
from app.services.simulator import RunMetrics, run

logger = logging.getLogger(__name__)

FIG_TRACE = "fig-trace"


def run_scenario(cfg: ScenarioConfig, out_dir=None, emit: tuple[str, ...] = ()) -> tuple[dict, RunMetrics]:
    """Simulate one scenario; with out_dir, write summary, event log and CSVs there."""
    metrics = run(cfg)
    summary = metrics.summary(cfg)
    if out_dir is not None:
        path = storage.prepare_out_dir(out_dir)
        storage.write_summary(path, summary)
        storage.write_events(path, metrics.events)
        storage.write_done_shards(path, metrics.done_shards)
        if FIG_TRACE in emit:
            storage.write_trace(path, metrics.bpt_trace)
    return summary, metrics


def _run_summary(cfg_data: dict) -> dict:
    # module-level so the process pool can pickle it
    cfg = parse_scenario(cfg_data)
    return run(cfg).summary(cfg)


@dataclass
class SweepSpec:
    axis: str
    values: list[Any]
    series: str = "policy"
    series_values: list[Any] = field(default_factory=list)
    couple: dict[str, list[Any]] = field(default_factory=dict)
    repeat: int = 3
    metric: str = "jct"

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        return cls(
            axis=data["axis"],
            values=list(data["values"]),
            series=data.get("series", "policy"),
            series_values=list(data.get("series_values", [])),
            couple={k: list(v) for k, v in (data.get("couple") or {}).items()},
            repeat=int(data.get("repeat", 3)),
            metric=data.get("metric", "jct"),
        )


@dataclass
class SweepRow:
    axis_value: Any
    series_value: Any
    mean: float
    std: float
    speedup: float
    runs: int

    def as_csv(self) -> list:
        return [self.axis_value, self.series_value, f"{self.mean:.6f}", f"{self.std:.6f}",
                f"{self.speedup:.6f}", self.runs]


SWEEP_HEADER = ["axis_value", "series", "mean", "std", "speedup", "runs"]


def _lookup(data, dotted: str):
    for part in dotted.split("."):
        data = data[int(part)] if isinstance(data, list) else data[part]
    return data


def sweep_configs(base: ScenarioConfig, spec: SweepSpec) -> list[tuple[Any, Any, int, ScenarioConfig]]:
    series_values = spec.series_values or [_lookup(dump_scenario(base), spec.series)]
    out = []
    for i, value in enumerate(spec.values):
        overrides = {spec.axis: value}
        for key, column in spec.couple.items():
            overrides[key] = column[i]
        for series_value in series_values:
            if spec.series_values:
                overrides[spec.series] = series_value
            for r in range(spec.repeat):
                cfg = apply_overrides(base, {**overrides, "seed": base.seed + r})
                out.append((value, series_value, r, cfg))
    return out


def sweep(base: ScenarioConfig, spec: SweepSpec, workers: Optional[int] = None) -> list[SweepRow]:
    """
    One row per (axis value, series value): mean and population std of the
    metric over `repeat` seeds, and the speedup of the first series value's
    mean over this row's mean.
    """
    jobs = sweep_configs(base, spec)
    payloads = [dump_scenario(cfg) for _, _, _, cfg in jobs]
    workers = workers or min(len(payloads), os.cpu_count() or 1)
    if workers <= 1:
        summaries = [_run_summary(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_summary, payloads))

    grouped: dict[tuple, list[float]] = {}
    for (value, series_value, _, _), summary in zip(jobs, summaries):
        grouped.setdefault((str(value), str(series_value)), []).append(float(summary[spec.metric]))

    rows = []
    baseline: dict[str, float] = {}
    for (value, series_value), samples in grouped.items():
        arr = np.asarray(samples, dtype=float)
        mean = float(arr.mean())
        baseline.setdefault(value, mean)
        speedup = baseline[value] / mean if mean > 0 else 0.0
        rows.append(SweepRow(value, series_value, mean, float(arr.std()), speedup, len(samples)))
        logger.info("sweep %s=%s %s=%s %s=%.1f±%.1f", spec.axis, value, spec.series, series_value,
                    spec.metric, mean, float(arr.std()))
    return rows


def write_sweep(path, rows: list[SweepRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return storage.write_csv(path, SWEEP_HEADER, [row.as_csv() for row in rows])


def list_presets(catalog: PresetCatalog) -> list[tuple[str, str]]:
    return [(p.id, p.description) for p in catalog.get_all_presets()]
