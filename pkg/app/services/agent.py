"""
Per-node agents: buffered metric reporting and the primary-broadcast /
local-barrier protocol that applies global actions on every worker at the
same iteration.
"""
import enum
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import httpx

from app.core import Action, ActionKind, ErrorCause, IterationRecord, NodeId
from app.errors import LateEnvelope, MonitorUnavailable, ProtocolError
from app.services.monitor import Monitor, NodeEvent, NodeEventKind

logger = logging.getLogger(__name__)

BUFFER_CAPACITY = 1000


class AgentRole(str, enum.Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"


@dataclass(frozen=True)
class SyncEnvelope:
    action: Action
    apply_at_iteration: int
    broadcast_seq: int

    def to_json(self) -> dict:
        return {
            "action": self.action.to_json(),
            "apply_at_iteration": self.apply_at_iteration,
            "broadcast_seq": self.broadcast_seq,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SyncEnvelope":
        return cls(Action.from_json(data["action"]), int(data["apply_at_iteration"]), int(data["broadcast_seq"]))


@dataclass
class WorkerParams:
    batch_size: int
    accum_steps: int = 1
    backup: int = 0
    lr_scale: Optional[str] = None


class InProcessSink:
    """Delivers flushed records straight into a Monitor."""

    def __init__(self, monitor: Monitor):
        self.monitor = monitor
        self.available = True

    def __call__(self, records: list[IterationRecord]):
        if not self.available:
            raise MonitorUnavailable("monitor is not accepting reports")
        self.monitor.ingest_many(records)


class HttpMonitorSink:
    """Posts records to a monitor service's /monitor endpoint."""

    def __init__(self, base_url: str, client: Optional[httpx.Client] = None, timeout: float = 2.0):
        self.client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def __call__(self, records: list[IterationRecord]):
        for delivered, record in enumerate(records):
            try:
                response = self.client.post("/monitor", json={"op": "ingest", **record.to_json()})
                if self._already_ingested(response):
                    continue
                response.raise_for_status()
            except httpx.HTTPError as exc:
                raise MonitorUnavailable(str(exc), delivered=delivered) from exc

    @staticmethod
    def _already_ingested(response: httpx.Response) -> bool:
        # a retry after a lost acknowledgement; the monitor kept the first copy
        if response.status_code != 409:
            return False
        try:
            return response.json().get("type") == "OutOfOrder"
        except ValueError:
            return False


class NodeAgent:
    def __init__(
        self,
        node: NodeId,
        sink: Callable[[list[IterationRecord]], None],
        report_every: int = 10,
        capacity: int = BUFFER_CAPACITY,
        params: Optional[WorkerParams] = None,
    ):
        self.node = node
        self.sink = sink
        self.report_every = report_every
        self.capacity = capacity
        self.buffer: deque[IterationRecord] = deque()
        self.dropped = 0
        self.flushes = 0
        self._ticks = 0
        self.mailbox: Optional[SyncEnvelope] = None
        self.params = params or WorkerParams(batch_size=1)
        self.last_applied: Optional[int] = None

    def report_tick(self, iteration: int, record: IterationRecord):
        if len(self.buffer) >= self.capacity:
            self.buffer.popleft()
            self.dropped += 1
        self.buffer.append(record)
        self._ticks += 1
        if self._ticks >= self.report_every:
            self._ticks = 0
            self.flush()

    def flush(self) -> bool:
        if not self.buffer:
            return True
        batch = list(self.buffer)
        try:
            self.sink(batch)
        except MonitorUnavailable as exc:
            for _ in range(min(exc.delivered, len(self.buffer))):
                self.buffer.popleft()
            logger.debug("flush deferred node=%s buffered=%d: %s", self.node, len(self.buffer), exc)
            return False
        self.buffer.clear()
        self.flushes += 1
        return True

    def receive(self, envelope: SyncEnvelope, current_iteration: int):
        if envelope.apply_at_iteration <= current_iteration:
            raise LateEnvelope(
                f"{self.node}: envelope {envelope.broadcast_seq} for iteration "
                f"{envelope.apply_at_iteration} arrived at {current_iteration}")
        self.mailbox = envelope

    def barrier_apply(self, envelope: SyncEnvelope, iteration: int, now: float = 0.0):
        """
        Apply the envelope at its iteration boundary. Returns the new
        WorkerParams, or a termination NodeEvent when the envelope kills this
        node.
        """
        if iteration > envelope.apply_at_iteration:
            raise LateEnvelope(f"{self.node}: iteration {iteration} is past {envelope.apply_at_iteration}")
        if iteration < envelope.apply_at_iteration:
            raise ProtocolError(f"{self.node}: barrier reached before iteration {envelope.apply_at_iteration}")
        action = envelope.action
        if self.mailbox is not None and self.mailbox.broadcast_seq == envelope.broadcast_seq:
            self.mailbox = None
        self.last_applied = iteration
        if action.kind == ActionKind.KILL_RESTART:
            if action.target == self.node:
                return self.terminate(now)
            return self.params
        if action.kind == ActionKind.ADJUST_BS:
            entry = action.allocation.for_worker(self.node.index)
            if entry is not None:
                self.params = WorkerParams(entry.batch_size, entry.accum_steps, self.params.backup,
                                           self.params.lr_scale)
        elif action.kind == ActionKind.BACKUP_WORKERS:
            self.params = WorkerParams(self.params.batch_size, self.params.accum_steps, action.backup,
                                       self.params.lr_scale)
        elif action.kind == ActionKind.ADJUST_LR:
            scales = dict(action.lr_scale)
            if self.node.index in scales:
                scale = scales[self.node.index]
                self.params = replace(self.params, lr_scale=f"{scale.numerator}/{scale.denominator}")
        return self.params

    def terminate(self, now: float) -> NodeEvent:
        logger.info("terminating node=%s cause=proactive_kill", self.node)
        return NodeEvent(self.node, now, NodeEventKind.TERMINATED, ErrorCause.PROACTIVE_KILL)


@dataclass
class PendingBroadcast:
    envelope: SyncEnvelope
    recipients: frozenset[int]


@dataclass
class AgentGroup:
    """The worker agents of one job; the lowest live index is the primary."""
    agents: dict[int, NodeAgent]
    sync_lead: int = 1
    live: set[int] = field(default_factory=set)
    pending: list[PendingBroadcast] = field(default_factory=list)
    aborted: int = 0
    late: int = 0
    _seq: int = 0

    def __post_init__(self):
        if not self.live:
            self.live = set(self.agents)

    @property
    def primary(self) -> Optional[int]:
        return min(self.live) if self.live else None

    def role_of(self, worker: int) -> AgentRole:
        return AgentRole.PRIMARY if worker == self.primary else AgentRole.SECONDARY

    def mark_dead(self, worker: int):
        was_primary = worker == self.primary
        self.live.discard(worker)
        if was_primary:
            logger.info("primary agent worker-%d lost; new primary=%s", worker, self.primary)

    def mark_live(self, worker: int):
        self.live.add(worker)

    def broadcast(
        self,
        action: Action,
        current_iteration: int,
        reachable: Optional[Callable[[int], bool]] = None,
    ) -> Optional[SyncEnvelope]:
        """Send a global action to every live worker; None when nothing was sent."""
        if action.is_none or self.primary is None:
            return None
        if action.kind == ActionKind.KILL_RESTART:
            raise ProtocolError("kill_restart is delivered to its target, not broadcast")
        self._seq += 1
        stamped = Action(action.kind, current_iteration, action.allocation, action.backup,
                         action.target, action.lr_scale)
        envelope = SyncEnvelope(stamped, current_iteration + self.sync_lead, self._seq)
        recipients = frozenset(self.live)
        primary = self.primary
        if reachable is not None:
            unreachable = sorted(w for w in recipients if w != primary and not reachable(w))
            if unreachable:
                self.aborted += 1
                logger.warning("envelope %d aborted: unreachable workers %s", self._seq, unreachable)
                return None
        for worker in sorted(recipients):
            self.agents[worker].receive(envelope, current_iteration)
        self.pending.append(PendingBroadcast(envelope, recipients))
        return envelope

    def apply_due(self, iteration: int, now: float = 0.0) -> list[tuple[SyncEnvelope, dict[int, WorkerParams]]]:
        """Apply every envelope due at this iteration boundary, all-or-nothing."""
        applied = []
        keep = []
        for entry in self.pending:
            due = entry.envelope.apply_at_iteration
            if due > iteration:
                keep.append(entry)
                continue
            if due < iteration:
                self.late += 1
                logger.error("envelope %d missed iteration %d", entry.envelope.broadcast_seq, due)
                continue
            if frozenset(self.live) != entry.recipients:
                self.aborted += 1
                logger.warning("envelope %d aborted: membership changed", entry.envelope.broadcast_seq)
                continue
            params = {w: self.agents[w].barrier_apply(entry.envelope, iteration, now) for w in sorted(self.live)}
            applied.append((entry.envelope, params))
        self.pending = keep
        return applied

    def abort_pending(self) -> int:
        count = len(self.pending)
        self.aborted += count
        self.pending = []
        return count

    def params(self) -> dict[int, WorkerParams]:
        return {w: self.agents[w].params for w in sorted(self.live)}


def build_agent_group(
    workers: Iterable[int],
    sink: Callable[[list[IterationRecord]], None],
    report_every: int,
    batch_sizes: dict[int, int],
    sync_lead: int = 1,
) -> AgentGroup:
    agents = {
        w: NodeAgent(NodeId.worker(w), sink, report_every, params=WorkerParams(batch_sizes[w]))
        for w in workers
    }
    return AgentGroup(agents, sync_lead=sync_lead)


class AgentService:
    """JSON front of an AgentGroup for service mode."""

    def __init__(self, group: AgentGroup):
        self.group = group

    def handle(self, message: dict) -> dict:
        op = message.get("op")
        if op == "broadcast":
            envelope = self.group.broadcast(Action.from_json(message["action"]), int(message["iteration"]))
            if envelope is None:
                return {"sent": False}
            return {"sent": True, "envelope": envelope.to_json()}
        if op == "apply":
            applied = self.group.apply_due(int(message["iteration"]))
            return {"applied": [
                {"envelope": env.to_json(),
                 "params": {str(w): vars(p) if isinstance(p, WorkerParams) else p.to_json()
                            for w, p in params.items()}}
                for env, params in applied
            ]}
        if op == "state":
            return {
                "primary": self.group.primary,
                "live": sorted(self.group.live),
                "params": {str(w): vars(p) for w, p in self.group.params().items()},
                "aborted": self.group.aborted,
            }
        raise ProtocolError(f"unknown agent op: {op!r}")
