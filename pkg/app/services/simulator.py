"""
Deterministic discrete-event simulator of a training cluster.

Time is kept in integer microseconds on one event heap ordered by
(time, sequence). BSP jobs advance one global iteration per event pair
(iteration_start / iteration_end); ASP jobs run an independent
fetch -> compute -> push cycle per worker. Data comes from the shard ledger,
metrics flow through the agents into the monitor, and the controller ticks
every `act_every` seconds.
"""
import heapq
import logging
from dataclasses import dataclass, field
from typing import Optional

from app.config import RecomputeMode, ScenarioConfig
from app.core import (
    Action,
    ActionKind,
    Architecture,
    BatchAllocation,
    Consistency,
    ErrorCause,
    EventLog,
    IterationRecord,
    NodeId,
    Policy,
    to_seconds,
    to_us,
)
from app.errors import JobAborted
from app.services.agent import InProcessSink, NodeAgent, WorkerParams, build_agent_group
from app.services.controller import Controller
from app.services.dds import EpochExhausted, LedgerSet, Shard, ShardStatus
from app.services.failover import CheckpointTracker, kill_restart_cost
from app.services.monitor import Directive, Monitor, NodeEvent, NodeEventKind
from app.services.patterns import PatternInjector

logger = logging.getLogger(__name__)


@dataclass
class RunMetrics:
    events: EventLog = field(default_factory=EventLog)
    jct: float = 0.0
    iterations: int = 0
    bpt_trace: list[tuple[float, str, float, int]] = field(default_factory=list)
    done_shards: dict[int, int] = field(default_factory=dict)
    actions: list[dict] = field(default_factory=list)
    sync_wait: float = 0.0
    duplicated_samples: int = 0
    dropped_samples: int = 0
    samples_processed: int = 0
    checkpoint_time: float = 0.0
    recompute_time: float = 0.0
    kills: int = 0
    aborted: bool = False
    abort_reason: Optional[str] = None
    aborted_envelopes: int = 0
    late_envelopes: int = 0
    ledgers: Optional[LedgerSet] = None

    @property
    def sync_overhead(self) -> float:
        return self.sync_wait / self.jct if self.jct > 0 else 0.0

    @property
    def failover_delay(self) -> float:
        """Checkpoint saving time plus recompute time; scheduling and init are excluded."""
        return self.checkpoint_time + self.recompute_time

    def summary(self, cfg: ScenarioConfig) -> dict:
        counts: dict[str, int] = {}
        for action in self.actions:
            counts[action["kind"]] = counts.get(action["kind"], 0) + 1
        return {
            "jct": round(self.jct, 6),
            "policy": cfg.policy.value,
            "consistency": cfg.consistency.value,
            "architecture": cfg.architecture.value,
            "seed": cfg.seed,
            "iterations": self.iterations,
            "shards_per_epoch": self.ledgers.k if self.ledgers else 0,
            "epochs": cfg.epochs,
            "done_shards": {str(w): c for w, c in sorted(self.done_shards.items())},
            "samples_processed": self.samples_processed,
            "duplicated_samples": self.duplicated_samples,
            "dropped_samples": self.dropped_samples,
            "sync_wait": round(self.sync_wait, 6),
            "sync_overhead": round(self.sync_overhead, 9),
            "failover_delay": round(self.failover_delay, 6),
            "checkpoint_time": round(self.checkpoint_time, 6),
            "recompute_time": round(self.recompute_time, 6),
            "kills": self.kills,
            "actions": counts,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "aborted_envelopes": self.aborted_envelopes,
            "late_envelopes": self.late_envelopes,
        }


def bsp_iteration(finish_times: dict[int, float], backup: int = 0) -> tuple[float, list[int], list[int]]:
    """
    Duration of one synchronous iteration: the slowest accepted worker.
    With `backup` > 0 the slowest min(backup, n-1) workers are dropped.
    Returns (duration, kept, dropped), ties broken toward the lower index.
    """
    order = sorted(finish_times, key=lambda w: (finish_times[w], w))
    drop = min(backup, len(order) - 1) if backup > 0 else 0
    kept = order[:len(order) - drop]
    dropped = order[len(order) - drop:]
    return max(finish_times[w] for w in kept), sorted(kept), sorted(dropped)


@dataclass
class _Draw:
    samples: int
    taken: list[tuple[Shard, int]]
    params: WorkerParams
    compute: float = 0.0
    server: float = 0.0
    comm: float = 0.0

    @property
    def total(self) -> float:
        return self.compute + self.server + self.comm


class ClusterSimulator:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.metrics = RunMetrics()
        self.events = self.metrics.events
        self.ledgers = LedgerSet(cfg.samples, cfg.global_batch, cfg.batches_per_shard, cfg.epochs, cfg.seed)
        self.metrics.ledgers = self.ledgers
        det = cfg.detection
        self.monitor = Monitor(det.window_persistent, det.busy_threshold)
        self.monitor.register(cfg.workers() + cfg.servers())
        self.controller = Controller(cfg, self.monitor)
        self.injector = PatternInjector(cfg)
        sink = InProcessSink(self.monitor)

        workers = list(range(cfg.n_workers))
        even = BatchAllocation.even(workers, cfg.global_batch)
        self.group = build_agent_group(
            workers, sink, det.report_every,
            {w: even.for_worker(w).batch_size for w in workers}, cfg.sync_lead)
        self.server_agents = {
            j: NodeAgent(NodeId.server(j), sink, det.report_every) for j in range(cfg.n_servers)
        }
        self.server_iterations = {j: 0 for j in range(cfg.n_servers)}
        self.worker_iterations = {w: 0 for w in workers}

        self.live_workers = set(workers)
        self.down_servers: set[int] = set()
        self.leases: dict[int, list[Shard]] = {w: [] for w in workers}
        self.backup = 0
        self.iteration = 0
        self.stall_until = 0
        self.now = 0
        self.checkpoint: Optional[CheckpointTracker] = None
        if cfg.failover.recompute_mode == RecomputeMode.CHECKPOINT_BASED:
            self.checkpoint = CheckpointTracker(cfg.failover.checkpoint_interval, cfg.failover.checkpoint_cost)
        self.rollback_samples = 0

        self._heap: list = []
        self._seq = 0
        self._done = False
        self._idle = False
        self._inflight: Optional[dict] = None
        self._delivery: dict[int, int] = {}
        self._native = cfg.policy == Policy.NATIVE_ASP
        self._gen = {w: 0 for w in workers}
        self._asp: dict[int, _Draw] = {}
        self._pushing: set[int] = set()
        self._asp_idle: set[int] = set()

    # event plumbing

    def _schedule(self, t_us: int, kind: str, **data):
        self._seq += 1
        heapq.heappush(self._heap, (t_us, self._seq, kind, data))

    @property
    def now_s(self) -> float:
        return to_seconds(self.now)

    def run(self) -> RunMetrics:
        cfg = self.cfg
        logger.info("simulating policy=%s consistency=%s n=%d K=%d epochs=%d seed=%d",
                    cfg.policy.value, cfg.consistency.value, cfg.n_workers, self.ledgers.k, cfg.epochs, cfg.seed)
        self._schedule(0, "tick")
        for failure in cfg.failover.failures:
            self._schedule(to_us(failure.at), "failure", node=failure.node_id, cause=failure.cause)
        if self.checkpoint is not None:
            self._schedule(to_us(self.checkpoint.next_due()), "checkpoint")
        if cfg.consistency == Consistency.BSP:
            self._schedule(0, "iteration_start")
        else:
            for w in sorted(self.live_workers):
                self._schedule(0, "asp_start", worker=w, gen=0)

        try:
            while self._heap and not self._done:
                t_us, _, kind, data = heapq.heappop(self._heap)
                self.now = t_us
                getattr(self, f"_on_{kind}")(**data)
        except JobAborted as exc:
            self.metrics.aborted = True
            self.metrics.abort_reason = str(exc)
            self.metrics.jct = self.now_s
            self.events.emit(self.now, "job_aborted", reason=str(exc))
            logger.warning("job aborted t=%.1f: %s", self.now_s, exc)
        if not self._done and not self.metrics.aborted:
            raise RuntimeError("event queue drained before the job finished")
        return self._finalize()

    def _finalize(self) -> RunMetrics:
        m = self.metrics
        for agent in list(self.group.agents.values()) + list(self.server_agents.values()):
            agent.flush()
        m.done_shards = self.ledgers.done_per_worker()
        m.duplicated_samples = self.ledgers.duplicated_samples + self.rollback_samples
        m.aborted_envelopes = self.group.aborted
        m.late_envelopes = self.group.late
        if self.checkpoint is not None:
            m.checkpoint_time = self.checkpoint.saving_time
        return m

    def _finish(self):
        self._done = True
        self.metrics.jct = self.now_s
        self.events.emit(self.now, "job_done", iterations=self.metrics.iterations)
        logger.info("job done jct=%.1f iterations=%d", self.now_s, self.metrics.iterations)

    # data

    def _next_shard(self, worker: int) -> Optional[Shard]:
        node = NodeId.worker(worker)
        if not self._native:
            result = self.ledgers.fetch(node, self.now_s)
            return None if isinstance(result, EpochExhausted) else result
        # even partition: a worker owns every n-th shard of each epoch's order
        n = self.cfg.n_workers
        for epoch in range(self.cfg.epochs):
            ledger = self.ledgers.ensure_epoch(epoch)
            for pos, sid in enumerate(ledger.order):
                if pos % n == worker and ledger.states[sid].status == ShardStatus.TODO:
                    return self.ledgers.lease(epoch, sid, node, self.now_s)
        return None

    def _draw(self, worker: int, want: int) -> tuple[int, list[tuple[Shard, int]]]:
        node = NodeId.worker(worker)
        got = 0
        taken = []
        held = self.leases[worker]
        for shard in held:
            if got >= want:
                break
            if self.ledgers.remaining(shard) > 0:
                n = self.ledgers.consume(shard, node, want - got)
                got += n
                taken.append((shard, n))
        while got < want:
            shard = self._next_shard(worker)
            if shard is None:
                break
            held.append(shard)
            n = self.ledgers.consume(shard, node, want - got)
            got += n
            taken.append((shard, n))
        return got, taken

    def _undo(self, worker: int, taken: list[tuple[Shard, int]]):
        node = NodeId.worker(worker)
        for shard, n in reversed(taken):
            self.ledgers.unconsume(shard, node, n)

    def _complete_shards(self, worker: int):
        node = NodeId.worker(worker)
        keep = []
        for shard in self.leases[worker]:
            if self.ledgers.remaining(shard) == 0:
                self.ledgers.report_done(shard, node, self.now_s)
            else:
                keep.append(shard)
        self.leases[worker] = keep

    # timing model

    def _server_times(self, t: float, contention: int = 0) -> dict[int, float]:
        if self.cfg.architecture == Architecture.ALL_REDUCE:
            return {}
        base = self.cfg.server_update_cost * (1 + contention * self.cfg.asp_contention)
        return {
            j: base + self.injector.compute_delay(NodeId.server(j), t)
            for j in range(self.cfg.n_servers) if j not in self.down_servers
        }

    def _worker_times(self, worker: int, samples: int, params: WorkerParams, t: float) -> tuple[float, float]:
        node = NodeId.worker(worker)
        speed = self.cfg.base_speed(worker) * self.injector.speed_multiplier(node)
        device = self.cfg.device_of(worker)
        saturation = params.accum_steps * (device.b_min if device else 1)
        compute = max(samples, saturation) / speed + self.injector.compute_delay(node, t)
        factor, extra = self.injector.comm_delay(node, t)
        return compute, self.cfg.comm_time * factor + extra

    def _record(self, worker: int, draw: _Draw, iteration: int, wall_time: float):
        p = draw.params
        batch = max(1, -(-draw.samples // p.accum_steps))
        record = IterationRecord(NodeId.worker(worker), iteration, wall_time, draw.compute, draw.server,
                                 draw.comm, batch, p.accum_steps)
        self.group.agents[worker].report_tick(iteration, record)
        self.metrics.bpt_trace.append((wall_time, str(record.node), round(draw.total, 9), p.batch_size))

    def _record_servers(self, server_times: dict[int, float], wall_time: float):
        for j, cost in server_times.items():
            self.server_iterations[j] += 1
            k = self.server_iterations[j]
            self.server_agents[j].report_tick(k, IterationRecord(NodeId.server(j), k, wall_time, server_compute=cost))

    # controller, failures, checkpoints

    def _on_tick(self):
        if self._done:
            return
        now = self.now_s
        self.monitor.set_pending_time(self.cfg.pending_time(now))
        for action in self.controller.step(now):
            self._dispatch(action)
        self._schedule(self.now + to_us(self.cfg.detection.act_every), "tick")

    def _dispatch(self, action: Action):
        entry = {"t": round(self.now_s, 6), "iteration": self.iteration, **action.to_json()}
        self.metrics.actions.append(entry)
        self.events.emit(self.now, "action", action=action.to_json(), iteration=self.iteration)
        if action.kind == ActionKind.KILL_RESTART:
            self._terminate(action.target, ErrorCause.PROACTIVE_KILL)
            return
        envelope = self.group.broadcast(action, self.iteration, reachable=lambda w: w in self.live_workers)
        if envelope is not None:
            self._delivery[envelope.broadcast_seq] = self.now + to_us(self.cfg.sync_latency)
            self.events.emit(self.now, "broadcast", seq=envelope.broadcast_seq,
                             apply_at=envelope.apply_at_iteration, kind=action.kind.value)

    def _on_failure(self, node: NodeId, cause: ErrorCause):
        if self._done:
            return
        if node.is_worker and node.index not in self.live_workers:
            return
        if not node.is_worker and node.index in self.down_servers:
            return
        self._terminate(node, cause)

    def _terminate(self, node: NodeId, cause: ErrorCause):
        now = self.now_s
        directive = self.monitor.on_node_event(NodeEvent(node, now, NodeEventKind.TERMINATED, cause))
        self.events.emit(self.now, "terminated", node, cause=cause.value, directive=directive.value)
        if directive == Directive.ABORT_JOB:
            raise JobAborted(f"{node} terminated with unretryable {cause.value}")

        held = self.ledgers.held_by(node) if node.is_worker else []
        leased_at = None
        if held:
            ledger_states = [self.ledgers.ledger(s.epoch).states[s.id] for s in held]
            leased_at = min(st.at for st in ledger_states)
        cost = kill_restart_cost(node, now, self.cfg.failover, self.cfg.is_busy(now),
                                 leased_at=leased_at, checkpoint=self.checkpoint)
        self.metrics.kills += 1
        self.metrics.recompute_time += cost.recompute

        if node.is_worker:
            w = node.index
            requeued = self.ledgers.recover_node(node) if directive == Directive.REQUEUE_SHARDS else 0
            self.live_workers.discard(w)
            self.group.mark_dead(w)
            self.leases[w] = []
            self._gen[w] += 1
            self._pushing.discard(w)
            self._asp_idle.discard(w)
            self._reset_allocation()
            self.events.emit(self.now, "requeued", node, shards=requeued)
            self._wake_idle()
        else:
            self.down_servers.add(node.index)

        if cost.stalls_all:
            stall = cost.downtime if not node.is_worker else 0.0
            if self.checkpoint is not None:
                stall = cost.downtime + cost.recompute
                self.rollback_samples += self.checkpoint.consumed_since
            self.stall_until = max(self.stall_until, self.now + to_us(stall))
        logger.info("terminated node=%s cause=%s downtime=%.1f recompute=%.1f",
                    node, cause.value, cost.downtime, cost.recompute)
        self._schedule(self.now + to_us(cost.downtime), "relaunch", node=node)

    def _on_relaunch(self, node: NodeId):
        if self._done:
            return
        self.monitor.on_node_event(NodeEvent(node, self.now_s, NodeEventKind.LAUNCHED))
        self.injector.relaunch(node)
        self.events.emit(self.now, "launched", node)
        if node.is_worker:
            self.live_workers.add(node.index)
            self.group.mark_live(node.index)
            self._reset_allocation()
            if self.cfg.consistency == Consistency.ASP:
                self._schedule(self.now, "asp_start", worker=node.index, gen=self._gen[node.index])
        else:
            self.down_servers.discard(node.index)
        if self._idle:
            self._idle = False
            self._schedule(self.now, "iteration_start")

    def _reset_allocation(self):
        """Membership changed: fall back to an even split over the live workers."""
        if self.cfg.consistency != Consistency.BSP or not self.live_workers:
            return
        even = BatchAllocation.even(sorted(self.live_workers), self.cfg.global_batch)
        for entry in even.per_worker:
            self.group.agents[entry.worker].params = WorkerParams(entry.batch_size, 1, self.backup)

    def _wake_idle(self):
        for w in sorted(self._asp_idle & self.live_workers):
            self._schedule(self.now, "asp_start", worker=w, gen=self._gen[w])
        self._asp_idle.clear()

    def _on_checkpoint(self):
        if self._done:
            return
        end = self.checkpoint.save(self.now_s)
        self.stall_until = max(self.stall_until, to_us(end))
        primary = self.group.primary
        if primary is not None:
            self.monitor.on_node_event(NodeEvent(NodeId.worker(primary), self.now_s, NodeEventKind.CHECKPOINT_SAVED))
        self.events.emit(self.now, "checkpoint", saves=self.checkpoint.saves)
        self._schedule(to_us(self.checkpoint.next_due()), "checkpoint")

    # BSP

    def _on_iteration_start(self):
        if self._done:
            return
        if self.now < self.stall_until:
            self._schedule(self.stall_until, "iteration_start")
            return

        wait = 0
        for envelope, params in self.group.apply_due(self.iteration, self.now_s):
            delivered = self._delivery.pop(envelope.broadcast_seq, self.now)
            wait = max(wait, max(0, delivered - self.now) + to_us(self.cfg.sync_latency))
            action = envelope.action
            if action.kind == ActionKind.BACKUP_WORKERS:
                self.backup = action.backup
            self.events.emit(self.now, "envelope_applied", seq=envelope.broadcast_seq,
                             iteration=self.iteration, kind=action.kind.value, workers=sorted(params))
        if wait:
            self.metrics.sync_wait += to_seconds(wait)
        start = self.now + wait
        t = to_seconds(start)

        allocated = 0
        draws: dict[int, _Draw] = {}
        for w, params in self.group.params().items():
            if w not in self.live_workers:
                continue
            allocated += params.batch_size * params.accum_steps
            got, taken = self._draw(w, params.batch_size * params.accum_steps)
            if got > 0:
                draws[w] = _Draw(got, taken, params)
        if not draws:
            if self.ledgers.is_complete():
                self._finish()
            else:
                self._idle = True
            return

        server_times = self._server_times(t)
        server = max(server_times.values()) if server_times else 0.0
        for w, draw in draws.items():
            draw.compute, draw.comm = self._worker_times(w, draw.samples, draw.params, t)
            draw.server = server
        duration, kept, dropped = bsp_iteration({w: d.total for w, d in draws.items()}, self.backup)
        for w in dropped:
            self._undo(w, draws[w].taken)
            self.metrics.dropped_samples += draws[w].samples
        self._inflight = {"iteration": self.iteration, "draws": draws, "kept": kept,
                          "dropped": dropped, "servers": server_times,
                          "allocated": allocated}
        self._schedule(start + to_us(duration), "iteration_end")

    def _on_iteration_end(self):
        state = self._inflight
        self._inflight = None
        k = state["iteration"]
        wall = self.now_s
        draws: dict[int, _Draw] = state["draws"]
        processed = 0
        for w in sorted(draws):
            if w not in self.live_workers:
                continue
            self._record(w, draws[w], k, wall)
            if w in state["kept"]:
                processed += draws[w].samples
                self._complete_shards(w)
        self._record_servers(state["servers"], wall)
        self.metrics.samples_processed += processed
        if self.checkpoint is not None:
            self.checkpoint.consumed_since += processed
        self.events.emit(self.now, "iteration", iteration=k, workers=len(state["kept"]),
                         dropped=state["dropped"], samples=processed, allocated=state["allocated"])
        self.metrics.iterations += 1
        self.iteration += 1
        if self.ledgers.is_complete():
            self._finish()
            return
        self._schedule(self.now, "iteration_start")

    # ASP

    def _stale(self, worker: int, gen: int) -> bool:
        return self._done or gen != self._gen[worker] or worker not in self.live_workers

    def _on_asp_start(self, worker: int, gen: int):
        if self._stale(worker, gen):
            return
        if self.now < self.stall_until:
            self._schedule(self.stall_until, "asp_start", worker=worker, gen=gen)
            return
        params = self.group.agents[worker].params
        got, taken = self._draw(worker, params.batch_size * params.accum_steps)
        if got == 0:
            self._asp_idle.add(worker)
            if self.ledgers.is_complete():
                self._finish()
            return
        draw = _Draw(got, taken, params)
        draw.compute, draw.comm = self._worker_times(worker, got, params, self.now_s)
        self._asp[worker] = draw
        self._schedule(self.now + to_us(draw.compute), "asp_push", worker=worker, gen=gen)

    def _on_asp_push(self, worker: int, gen: int):
        if self._stale(worker, gen):
            return
        start = max(self.now, self.stall_until)
        server_times = self._server_times(to_seconds(start), contention=len(self._pushing))
        draw = self._asp[worker]
        draw.server = max(server_times.values()) if server_times else 0.0
        self._pushing.add(worker)
        self._schedule(start + to_us(draw.comm + draw.server), "asp_done", worker=worker, gen=gen,
                       servers=server_times)

    def _on_asp_done(self, worker: int, gen: int, servers: dict[int, float]):
        if self._stale(worker, gen):
            return
        self._pushing.discard(worker)
        draw = self._asp.pop(worker)
        self.worker_iterations[worker] += 1
        wall = self.now_s
        self._record(worker, draw, self.worker_iterations[worker], wall)
        self._record_servers(servers, wall)
        self._complete_shards(worker)
        self.metrics.samples_processed += draw.samples
        if self.checkpoint is not None:
            self.checkpoint.consumed_since += draw.samples
        self.metrics.iterations += 1
        if self.ledgers.is_complete():
            self._finish()
            return
        self._schedule(self.now, "asp_start", worker=worker, gen=gen)


def run(cfg: ScenarioConfig) -> RunMetrics:
    return ClusterSimulator(cfg).run()
