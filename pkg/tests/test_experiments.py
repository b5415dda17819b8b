import csv
import importlib
import json
from pathlib import Path

import pytest

from app import cli
from app.config import apply_overrides, dump_scenario
from app.services import experiments
from app.services.experiments import SweepSpec, run_scenario, sweep, sweep_configs


@pytest.fixture
def scenario_file(make_cfg, tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(dump_scenario(make_cfg())))
    return path


class TestRunScenario:
    def test_writes_outputs(self, make_cfg, tmp_path):
        summary, metrics = run_scenario(make_cfg(), tmp_path / "out", emit=(experiments.FIG_TRACE,))
        out = tmp_path / "out"
        assert json.loads((out / "summary.json").read_text())["jct"] == pytest.approx(50.0)
        lines = (out / "events.jsonl").read_text().splitlines()
        assert json.loads(lines[-1])["kind"] == "job_done"
        with open(out / "done_shards.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["worker", "done_shards"]
        assert sum(int(r[1]) for r in rows[1:]) == 20
        with open(out / "trace.csv", newline="") as f:
            trace = list(csv.reader(f))
        assert trace[0] == ["t", "node", "bpt", "batch_size"]
        assert len(trace) == 1 + 4 * metrics.iterations

    def test_trace_only_on_request(self, make_cfg, tmp_path):
        run_scenario(make_cfg(), tmp_path)
        assert not (tmp_path / "trace.csv").exists()

    def test_identical_runs_identical_bytes(self, make_cfg, tmp_path):
        cfg = make_cfg(patterns=[{"kind": "transient", "sleep_duration": 1.0, "intensity": 0.5,
                                  "probability": 0.5, "on_period": 10.0, "cycle": 20.0}])
        run_scenario(cfg, tmp_path / "a")
        run_scenario(cfg, tmp_path / "b")
        for name in ("summary.json", "events.jsonl", "done_shards.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestSweep:
    def test_configs_cover_grid(self, make_cfg):
        spec = SweepSpec(axis="worker_speed", values=[200.0, 400.0],
                         series_values=["native_bsp", "lb_bsp"], repeat=2)
        jobs = sweep_configs(make_cfg(seed=10), spec)
        assert len(jobs) == 8
        assert sorted({cfg.seed for _, _, _, cfg in jobs}) == [10, 11]

    def test_coupled_axis(self, make_cfg):
        base = make_cfg(patterns=[{"kind": "persistent", "targets": [["worker", 3]], "delay": 0.5}])
        spec = SweepSpec(axis="worker_speed", values=[200.0, 400.0],
                         couple={"patterns.0.delay": [0.5, 1.5]}, repeat=1)
        jobs = sweep_configs(base, spec)
        assert [cfg.patterns[0].delay for _, _, _, cfg in jobs] == [0.5, 1.5]

    def test_rows_and_speedup(self, make_cfg):
        base = make_cfg(patterns=[{"kind": "persistent", "targets": [["worker", 3]], "delay": 1.5}])
        spec = SweepSpec(axis="worker_speed", values=[200.0],
                         series_values=["native_bsp", "backup_workers"], repeat=1)
        rows = sweep(apply_backup(base), spec, workers=1)
        assert [r.series_value for r in rows] == ["native_bsp", "backup_workers"]
        assert rows[0].speedup == pytest.approx(1.0)
        assert rows[1].speedup > 1.0
        assert rows[0].std == 0.0

    def test_write_sweep(self, tmp_path):
        rows = [experiments.SweepRow(0.1, "native_bsp", 10.0, 0.5, 1.0, 3)]
        path = experiments.write_sweep(tmp_path / "nested" / "s.csv", rows)
        assert path.read_bytes().startswith(b"axis_value,series,mean,std,speedup,runs\r\n")


def apply_backup(cfg):
    return apply_overrides(cfg, {"backup_workers": 1})


class TestCli:
    def test_run(self, scenario_file, tmp_path, capsys):
        code = cli.main(["run", "--config", str(scenario_file), "--out", str(tmp_path / "run"),
                         "--emit", "fig-trace"])
        assert code == cli.EXIT_OK
        assert json.loads(capsys.readouterr().out)["jct"] == pytest.approx(50.0)
        assert (tmp_path / "run" / "trace.csv").exists()

    def test_unknown_override_key(self, scenario_file, capsys):
        code = cli.main(["run", "--config", str(scenario_file), "--set", "detection.lamda=2"])
        assert code == cli.EXIT_INVALID
        assert "detection.lamda" in capsys.readouterr().err

    def test_invalid_config(self, scenario_file, capsys):
        code = cli.main(["validate", "--config", str(scenario_file), "--set", "detection.lambda=1.0"])
        assert code == cli.EXIT_INVALID
        assert "lambda must exceed 1" in capsys.readouterr().err

    def test_validate_preset(self, capsys):
        assert cli.main(["validate", "--preset", "nd-worker-si08"]) == cli.EXIT_OK
        assert capsys.readouterr().out.strip() == "ok"

    def test_unknown_preset(self, capsys):
        assert cli.main(["validate", "--preset", "nope"]) == cli.EXIT_INVALID

    def test_aborted_run(self, scenario_file, tmp_path):
        failure = '[{"at": 5.0, "node": ["worker", 0], "cause": "program_error"}]'
        code = cli.main(["run", "--config", str(scenario_file), "--out", str(tmp_path / "abort"),
                         "--set", f"failover.failures={failure}"])
        assert code == cli.EXIT_ABORTED

    def test_presets(self, capsys):
        assert cli.main(["presets"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "nd-worker-si08" in out
        assert "dd-hetero-gpu" in out

    def test_solve(self, tmp_path, capsys):
        problem = tmp_path / "problem.json"
        problem.write_text('{"B": 10, "speeds": [1, 2]}')
        assert cli.main(["solve", str(problem)]) == cli.EXIT_OK
        assert json.loads(capsys.readouterr().out)["allocation"] == [[0, 3, 1], [1, 7, 1]]

    def test_solve_infeasible(self, tmp_path, capsys):
        problem = tmp_path / "problem.json"
        problem.write_text('{"B": 2, "speeds": [1, 1, 1]}')
        assert cli.main(["solve", str(problem)]) == cli.EXIT_INVALID
        assert json.loads(capsys.readouterr().out)["nearest"] == [None, 3]

    def test_sweep(self, scenario_file, tmp_path):
        out = tmp_path / "sweep.csv"
        code = cli.main(["sweep", "--config", str(scenario_file), "--axis", "worker_speed",
                         "--values", "200,400", "--policies", "native_bsp,lb_bsp",
                         "--repeat", "1", "--workers", "1", "--out", str(out)])
        assert code == cli.EXIT_OK
        with open(out, newline="") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 1 + 4
        assert rows[1][1] == "native_bsp"

    def test_console_script_points_at_main(self):
        tomllib = pytest.importorskip("tomllib")
        with open(Path(__file__).resolve().parents[1] / "pyproject.toml", "rb") as f:
            scripts = tomllib.load(f)["project"]["scripts"]
        module, _, attr = scripts["antdt"].partition(":")
        assert importlib.import_module(module).__dict__[attr] is cli.main
