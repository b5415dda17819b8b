"""
Sliding-window view of the cluster: per-node iteration records, node
lifecycle events and the scheduler's pending-time signal.

Window queries return None when a node has no record in the window (NoData).
"""
import enum
import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

from app.core import ErrorCause, IterationRecord, NodeId, RETRYABLE_CAUSES, Role
from app.errors import OutOfOrder, ProtocolError

logger = logging.getLogger(__name__)


class NodeEventKind(str, enum.Enum):
    TERMINATED = "terminated"
    LAUNCHED = "launched"
    CHECKPOINT_SAVED = "checkpoint_saved"


@dataclass(frozen=True)
class NodeEvent:
    node: NodeId
    at: float
    kind: NodeEventKind
    cause: Optional[ErrorCause] = None

    def __post_init__(self):
        if (self.kind == NodeEventKind.TERMINATED) != (self.cause is not None):
            raise ValueError("exactly the terminated events carry an error cause")

    @property
    def retryable(self) -> bool:
        return self.cause in RETRYABLE_CAUSES

    def to_json(self) -> dict:
        return {
            "node": self.node.to_json(),
            "at": self.at,
            "kind": self.kind.value,
            "cause": self.cause.value if self.cause else None,
        }

    @classmethod
    def from_json(cls, data: dict) -> "NodeEvent":
        cause = data.get("cause")
        return cls(NodeId.from_json(data["node"]), float(data["at"]),
                   NodeEventKind(data["kind"]), ErrorCause(cause) if cause else None)


class Directive(str, enum.Enum):
    REQUEUE_SHARDS = "requeue_shards"
    ABORT_JOB = "abort_job"
    NONE = "none"


@dataclass(frozen=True)
class ClusterSignal:
    pending_time: float
    threshold: float = 120.0

    @property
    def busy(self) -> bool:
        return self.pending_time > self.threshold


def _mean(values: list[float]) -> Optional[float]:
    if not values:
        return None
    return sum(values) / len(values)


class Monitor:
    def __init__(self, window_persistent: float = 600.0, busy_threshold: float = 120.0):
        self.retention = 2 * window_persistent
        self.busy_threshold = busy_threshold
        self.pending_time = 0.0
        self.anomalies = 0
        self.windows: dict[NodeId, deque[IterationRecord]] = {}
        self.latest: dict[NodeId, tuple[float, int]] = {}
        self.launched_at: dict[NodeId, float] = {}
        self.down: set[NodeId] = set()

    def register(self, nodes: Iterable[NodeId]):
        for node in nodes:
            self.windows.setdefault(node, deque())

    def ingest(self, record: IterationRecord):
        key = (record.wall_time, record.iteration)
        last = self.latest.get(record.node)
        if last is not None and key <= last:
            raise OutOfOrder(f"{record.node}: record {key} not after {last}")
        self.latest[record.node] = key
        window = self.windows.setdefault(record.node, deque())
        window.append(record)
        horizon = record.wall_time - self.retention
        while window and window[0].wall_time < horizon:
            window.popleft()

    def ingest_many(self, records: Iterable[IterationRecord]):
        for record in records:
            self.ingest(record)

    def _records(self, node: NodeId, horizon: float, now: float) -> list[IterationRecord]:
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        return [r for r in self.windows.get(node, ()) if now - horizon <= r.wall_time <= now]

    def mean_bpt(self, node: NodeId, horizon: float, now: float) -> Optional[float]:
        records = self._records(node, horizon, now)
        if node.is_worker:
            return _mean([r.worker_compute for r in records])
        return _mean([r.server_compute for r in records])

    def nodes(self, role: Role) -> list[NodeId]:
        return sorted(n for n in self.windows if n.role == role)

    def node_means(self, role: Role, horizon: float, now: float) -> dict[NodeId, float]:
        out = {}
        for node in self.nodes(role):
            mean = self.mean_bpt(node, horizon, now)
            if mean is not None:
                out[node] = mean
        return out

    def fleet_mean_bpt(self, role: Role, horizon: float, now: float) -> Optional[float]:
        return _mean(list(self.node_means(role, horizon, now).values()))

    def throughput(self, worker: NodeId, horizon: float, now: float) -> Optional[float]:
        rates = []
        for r in self._records(worker, horizon, now):
            if r.worker_compute <= 0:
                self.anomalies += 1
                logger.warning("zero compute time node=%s iteration=%d", worker, r.iteration)
                continue
            rates.append(r.samples / r.worker_compute)
        return _mean(rates)

    def on_node_event(self, event: NodeEvent) -> Directive:
        if event.kind == NodeEventKind.TERMINATED:
            self.down.add(event.node)
            if not event.retryable:
                logger.warning("unretryable termination node=%s cause=%s", event.node, event.cause.value)
                return Directive.ABORT_JOB
            if event.node.is_worker:
                return Directive.REQUEUE_SHARDS
            return Directive.NONE
        if event.kind == NodeEventKind.LAUNCHED:
            self.down.discard(event.node)
            self.launched_at[event.node] = event.at
            # a relaunched node starts with cold windows
            self.windows[event.node] = deque()
        return Directive.NONE

    def is_live(self, node: NodeId) -> bool:
        return node not in self.down

    def set_pending_time(self, pending_time: float):
        if pending_time < 0:
            raise ValueError("pending time must be non-negative")
        self.pending_time = pending_time

    def cluster_signal(self) -> ClusterSignal:
        return ClusterSignal(self.pending_time, self.busy_threshold)


class MonitorService:
    """Dispatches the monitor's JSON messages (ingest, event, query, pending)."""

    def __init__(self, monitor: Monitor):
        self.monitor = monitor

    def handle(self, message: dict) -> dict:
        op = message.get("op")
        if op == "ingest":
            body = {k: v for k, v in message.items() if k != "op"}
            self.monitor.ingest(IterationRecord.from_json(body))
            return {"ok": True}
        if op == "event":
            directive = self.monitor.on_node_event(NodeEvent.from_json(message))
            return {"directive": directive.value}
        if op == "pending":
            self.monitor.set_pending_time(float(message["pending_time"]))
            signal = self.monitor.cluster_signal()
            return {"pending_time": signal.pending_time, "busy": signal.busy}
        if op == "query":
            return {"value": self._query(message)}
        raise ProtocolError(f"unknown monitor op: {op!r}")

    def _query(self, message: dict) -> Optional[float]:
        kind = message.get("kind")
        horizon = float(message["horizon"])
        now = float(message["now"])
        if kind == "mean_bpt":
            return self.monitor.mean_bpt(NodeId.from_json(message["node"]), horizon, now)
        if kind == "throughput":
            return self.monitor.throughput(NodeId.from_json(message["node"]), horizon, now)
        if kind == "fleet":
            return self.monitor.fleet_mean_bpt(Role(message.get("role", "worker")), horizon, now)
        raise ProtocolError(f"unknown query kind: {kind!r}")
