import pytest

from app.core import ErrorCause, IterationRecord, NodeId, Role
from app.errors import OutOfOrder, ProtocolError
from app.services.monitor import (
    ClusterSignal,
    Directive,
    Monitor,
    MonitorService,
    NodeEvent,
    NodeEventKind,
)

W0, W1, W2 = (NodeId.worker(i) for i in range(3))
PS0 = NodeId.server(0)


def rec(node, iteration, wall, compute, batch=100):
    if node.is_worker:
        return IterationRecord(node, iteration, wall, worker_compute=compute, batch_size=batch)
    return IterationRecord(node, iteration, wall, server_compute=compute)


@pytest.fixture
def monitor():
    m = Monitor(window_persistent=600.0, busy_threshold=120.0)
    m.register([W0, W1, W2, PS0])
    return m


class TestWindows:
    def test_mean_over_window(self, monitor):
        monitor.ingest_many([rec(W0, 1, 10.0, 1.0), rec(W0, 2, 20.0, 2.0), rec(W0, 3, 30.0, 3.0)])
        assert len(monitor.windows[W0]) == 3
        assert monitor.mean_bpt(W0, horizon=300.0, now=30.0) == pytest.approx(2.0)

    def test_empty_window_is_no_data(self, monitor):
        assert monitor.mean_bpt(W1, horizon=300.0, now=100.0) is None

    def test_horizon_cuts_old_records(self, monitor):
        monitor.ingest(rec(W0, 1, 0.0, 9.0))
        monitor.ingest(rec(W0, 2, 400.0, 2.0))
        assert monitor.mean_bpt(W0, horizon=300.0, now=400.0) == pytest.approx(2.0)

    def test_stale_record_kept_until_eviction(self, monitor):
        monitor.ingest(rec(W0, 1, 0.0, 9.0))
        monitor.ingest(rec(W0, 2, 1000.0, 2.0))
        assert len(monitor.windows[W0]) == 2
        assert monitor.mean_bpt(W0, horizon=600.0, now=1000.0) == pytest.approx(2.0)
        monitor.ingest(rec(W0, 3, 1300.0, 2.0))
        assert [r.iteration for r in monitor.windows[W0]] == [2, 3]

    def test_out_of_order(self, monitor):
        monitor.ingest(rec(W0, 5, 50.0, 1.0))
        with pytest.raises(OutOfOrder):
            monitor.ingest(rec(W0, 4, 40.0, 1.0))
        with pytest.raises(OutOfOrder):
            monitor.ingest(rec(W0, 5, 50.0, 1.0))

    def test_server_uses_server_compute(self, monitor):
        monitor.ingest(rec(PS0, 1, 5.0, 0.5))
        assert monitor.mean_bpt(PS0, horizon=300.0, now=5.0) == pytest.approx(0.5)


class TestFleetMean:
    def test_mean_of_node_means(self, monitor):
        monitor.ingest(rec(W0, 1, 1.0, 1.0))
        monitor.ingest(rec(W1, 1, 1.0, 2.0))
        monitor.ingest(rec(W2, 1, 1.0, 3.0))
        assert monitor.fleet_mean_bpt(Role.WORKER, 300.0, 1.0) == pytest.approx(2.0)

    def test_no_data_nodes_are_skipped(self, monitor):
        monitor.ingest(rec(W0, 1, 1.0, 1.0))
        monitor.ingest(rec(W2, 1, 1.0, 3.0))
        assert monitor.fleet_mean_bpt(Role.WORKER, 300.0, 1.0) == pytest.approx(2.0)

    def test_all_no_data(self, monitor):
        assert monitor.fleet_mean_bpt(Role.WORKER, 300.0, 1.0) is None


class TestThroughput:
    def test_mean_of_rates(self, monitor):
        monitor.ingest(rec(W0, 1, 1.0, 2.0, batch=4096))
        monitor.ingest(rec(W0, 2, 3.0, 4.0, batch=4096))
        assert monitor.throughput(W0, 300.0, 3.0) == pytest.approx(1536.0)

    def test_single_record(self, monitor):
        monitor.ingest(rec(W0, 1, 1.0, 1.0, batch=100))
        assert monitor.throughput(W0, 300.0, 1.0) == pytest.approx(100.0)

    def test_empty(self, monitor):
        assert monitor.throughput(W0, 300.0, 1.0) is None

    def test_zero_compute_is_anomaly(self, monitor):
        monitor.ingest(rec(W0, 1, 1.0, 0.0))
        monitor.ingest(rec(W0, 2, 2.0, 1.0, batch=50))
        assert monitor.throughput(W0, 300.0, 2.0) == pytest.approx(50.0)
        assert monitor.anomalies == 1


class TestNodeEvents:
    def test_retryable_worker_requeues(self, monitor):
        event = NodeEvent(W1, 10.0, NodeEventKind.TERMINATED, ErrorCause.EVICTION)
        assert monitor.on_node_event(event) == Directive.REQUEUE_SHARDS
        assert not monitor.is_live(W1)

    def test_unretryable_aborts(self, monitor):
        event = NodeEvent(W1, 10.0, NodeEventKind.TERMINATED, ErrorCause.CONFIG_ERROR)
        assert monitor.on_node_event(event) == Directive.ABORT_JOB

    def test_retryable_server(self, monitor):
        event = NodeEvent(PS0, 10.0, NodeEventKind.TERMINATED, ErrorCause.PROACTIVE_KILL)
        assert monitor.on_node_event(event) == Directive.NONE

    def test_launch_resets_window(self, monitor):
        monitor.ingest(rec(W1, 1, 1.0, 5.0))
        monitor.on_node_event(NodeEvent(W1, 10.0, NodeEventKind.TERMINATED, ErrorCause.PROACTIVE_KILL))
        assert monitor.on_node_event(NodeEvent(W1, 90.0, NodeEventKind.LAUNCHED)) == Directive.NONE
        assert monitor.is_live(W1)
        assert monitor.launched_at[W1] == 90.0
        assert monitor.mean_bpt(W1, 300.0, 90.0) is None

    def test_checkpoint_saved(self, monitor):
        assert monitor.on_node_event(NodeEvent(W0, 1.0, NodeEventKind.CHECKPOINT_SAVED)) == Directive.NONE

    def test_cause_only_on_termination(self):
        with pytest.raises(ValueError):
            NodeEvent(W0, 1.0, NodeEventKind.LAUNCHED, ErrorCause.EVICTION)
        with pytest.raises(ValueError):
            NodeEvent(W0, 1.0, NodeEventKind.TERMINATED)


class TestClusterSignal:
    def test_busy_above_threshold(self, monitor):
        monitor.set_pending_time(30.0)
        assert not monitor.cluster_signal().busy
        monitor.set_pending_time(1800.0)
        assert monitor.cluster_signal().busy

    def test_threshold_is_exclusive(self):
        assert not ClusterSignal(120.0, 120.0).busy

    def test_negative_pending_time(self, monitor):
        with pytest.raises(ValueError):
            monitor.set_pending_time(-1.0)


class TestMonitorService:
    def test_ingest_and_query(self, monitor):
        service = MonitorService(monitor)
        body = rec(W0, 1, 5.0, 2.0).to_json()
        assert service.handle({"op": "ingest", **body}) == {"ok": True}
        reply = service.handle({"op": "query", "kind": "mean_bpt", "node": ["worker", 0],
                                "horizon": 300, "now": 5.0})
        assert reply == {"value": 2.0}
        fleet = service.handle({"op": "query", "kind": "fleet", "horizon": 300, "now": 5.0})
        assert fleet == {"value": 2.0}

    def test_event_and_pending(self, monitor):
        service = MonitorService(monitor)
        reply = service.handle({"op": "event", "node": ["worker", 2], "at": 3.0,
                                "kind": "terminated", "cause": "network_error"})
        assert reply == {"directive": "requeue_shards"}
        assert service.handle({"op": "pending", "pending_time": 200}) == {"pending_time": 200.0, "busy": True}

    def test_unknown_op(self, monitor):
        with pytest.raises(ProtocolError):
            MonitorService(monitor).handle({"op": "forget"})
