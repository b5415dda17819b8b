"""Shared fixtures: small scenarios that simulate in well under a second."""
import pytest

from app.config import apply_overrides, parse_scenario

SMALL_SCENARIO = {
    "n_workers": 4,
    "n_servers": 2,
    "global_batch": 400,
    "samples": 40000,
    "batches_per_shard": 5,
    "epochs": 1,
    "worker_speed": 200.0,
    "server_update_cost": 0.0,
    "comm_time": 0.0,
    "sync_latency": 0.0,
    "policy": "native_bsp",
    "detection": {
        "lambda": 1.5,
        "window_transient": 20.0,
        "window_persistent": 40.0,
        "report_every": 1,
        "act_every": 20.0,
    },
}


@pytest.fixture
def make_cfg():
    """Build a small validated scenario; keyword overrides use dotted keys."""
    def _make(**overrides):
        cfg = parse_scenario(SMALL_SCENARIO)
        dotted = {key.replace("__", "."): value for key, value in overrides.items()}
        return apply_overrides(cfg, dotted)
    return _make
