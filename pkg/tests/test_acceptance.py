"""Policy trends on the full-size presets; each run simulates hours of training."""
import pytest

from app.config import apply_overrides, catalog
from app.core import Consistency
from app.services.simulator import run
from tests.test_simulator import assert_sync_protocol

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2]


def preset(preset_id: str, seed: int = 0, **overrides):
    cfg = catalog.get_preset(preset_id).cfg
    return apply_overrides(cfg, {"seed": seed, **overrides})


def jct(cfg) -> float:
    metrics = run(cfg)
    assert not metrics.aborted
    return metrics.jct


@pytest.mark.parametrize("seed", SEEDS)
class TestWorkerStragglers:
    def test_nd_halves_native_bsp(self, seed):
        assert jct(preset("nd-worker-si08", seed)) <= 0.55 * jct(preset("nd-worker-si08-bsp", seed))

    def test_speedup_grows_with_intensity(self, seed):
        speedups = []
        for pid in ("nd-worker-si01", "nd-worker-si03", "nd-worker-si05", "nd-worker-si08"):
            speedups.append(jct(preset(pid, seed, policy="native_bsp")) / jct(preset(pid, seed)))
        assert all(later >= earlier - 0.02 for earlier, later in zip(speedups, speedups[1:]))

    def test_sync_overhead_is_negligible(self, seed):
        metrics = run(preset("nd-worker-si08", seed))
        assert metrics.events.of_kind("envelope_applied")
        assert metrics.sync_overhead < 0.01


@pytest.mark.parametrize("seed", SEEDS)
def test_nd_kills_persistent_server(seed):
    nd = jct(preset("nd-server-persistent", seed))
    assert nd <= 0.5 * jct(preset("nd-server-bsp", seed))
    # rebalancing workers cannot hide a slow server
    assert jct(preset("nd-server-lb", seed)) > nd
    assert jct(preset("nd-server-backup", seed)) > nd


@pytest.mark.parametrize("seed", SEEDS)
def test_asp_ordering(seed):
    native, dds, nd = (jct(preset(pid, seed)) for pid in ("asp-native", "asp-dds", "asp-antdt"))
    assert nd < dds < native
    assert native >= 3 * nd


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_accum_plan_beats_baselines(seed):
    dd, lb, ddp = (jct(preset(pid, seed)) for pid in ("dd-hetero-gpu", "dd-lb", "dd-ddp"))
    assert dd < lb < ddp
    assert ddp >= 1.2 * dd


def test_dds_failover_beats_checkpoint_restart():
    base = preset("failover-compare")
    dds = run(apply_overrides(base, {"failover.recompute_mode": "dds_based"}))
    assert dds.kills == 1
    assert dds.checkpoint_time == 0.0

    delays = []
    for interval in (300.0, 600.0, 1200.0, 2400.0):
        cfg = apply_overrides(base, {"failover.recompute_mode": "checkpoint_based",
                                     "failover.checkpoint_interval": interval})
        delays.append(run(cfg).failover_delay)
    assert dds.failover_delay < min(delays)
    tail = delays[delays.index(min(delays)):]
    assert tail == sorted(tail)


@pytest.mark.parametrize("preset_id", [p.id for p in catalog.get_all_presets()])
def test_identical_seeds_identical_event_logs(preset_id):
    cfg = preset(preset_id)
    assert run(cfg).events.events == run(cfg).events.events


@pytest.mark.parametrize("preset_id", [p.id for p in catalog.get_all_presets()
                                       if p.cfg.consistency == Consistency.BSP])
def test_sync_protocol_holds(preset_id):
    cfg = preset(preset_id)
    metrics = run(cfg)
    assert_sync_protocol(metrics, cfg)
    assert metrics.sync_overhead < 0.01
