"""
Dynamic data sharding: the shard ledger with TODO/DOING/DONE states.

A shard is just (start offset, length); the ledger owns the queue of TODO
shards and the state of every shard of one epoch. Recovery puts a dead node's
DOING shards back at the tail of the queue.
"""
import enum
import logging
import random
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional, Union

from app.core import NodeId
from app.errors import ConfigurationError, IllegalTransition, ProtocolError

logger = logging.getLogger(__name__)

MAX_INT64 = 2**63 - 1


@dataclass(frozen=True)
class Shard:
    id: int
    start: int
    length: int
    epoch: int = 0

    @property
    def end(self) -> int:
        return self.start + self.length

    def to_json(self) -> dict:
        return {"id": self.id, "start": self.start, "len": self.length, "epoch": self.epoch}


class ShardStatus(str, enum.Enum):
    TODO = "todo"
    DOING = "doing"
    DONE = "done"


@dataclass(frozen=True)
class ShardState:
    status: ShardStatus
    node: Optional[NodeId] = None   # holder while DOING, finisher once DONE
    at: Optional[float] = None

    @classmethod
    def todo(cls) -> "ShardState":
        return cls(ShardStatus.TODO)


@dataclass(frozen=True)
class EpochExhausted:
    """No TODO shard left to hand out; DOING shards may still be in flight."""
    epoch: int


FetchResult = Union[Shard, EpochExhausted]


class ShardLedger:
    def __init__(self, shards: list[Shard], order: list[int], epoch: int):
        self.epoch = epoch
        self.shards = {s.id: s for s in shards}
        self.states = {s.id: ShardState.todo() for s in shards}
        self.order = tuple(order)
        self.queue: deque[int] = deque(order)
        self.cursor: dict[int, int] = {}
        self.duplicated_samples = 0
        self._lease_seq = 0
        self.done_count = 0
        self._leased: dict[int, int] = {}

    @property
    def k(self) -> int:
        return len(self.shards)

    def _require_worker(self, node: NodeId):
        if not node.is_worker:
            raise ProtocolError(f"{node} is not a worker and cannot lease shards")

    def _start(self, shard_id: int, worker: NodeId, now: float) -> Shard:
        self.states[shard_id] = ShardState(ShardStatus.DOING, worker, now)
        self.cursor[shard_id] = 0
        self._lease_seq += 1
        self._leased[shard_id] = self._lease_seq
        return self.shards[shard_id]

    def fetch(self, worker: NodeId, now: float) -> FetchResult:
        self._require_worker(worker)
        if not self.queue:
            return EpochExhausted(self.epoch)
        return self._start(self.queue.popleft(), worker, now)

    def lease(self, shard_id: int, worker: NodeId, now: float) -> Shard:
        """Lease a specific TODO shard, for sources that partition the data up front."""
        self._require_worker(worker)
        state = self.states.get(shard_id)
        if state is None or state.status != ShardStatus.TODO:
            raise IllegalTransition(f"shard {shard_id} is not TODO")
        self.queue.remove(shard_id)
        return self._start(shard_id, worker, now)

    def consume(self, shard_id: int, worker: NodeId, samples: int) -> int:
        """Advance the read cursor of a DOING shard; returns samples actually taken."""
        state = self.states[shard_id]
        if state.status != ShardStatus.DOING or state.node != worker:
            raise IllegalTransition(f"shard {shard_id} is not held by {worker}")
        taken = min(samples, self.shards[shard_id].length - self.cursor[shard_id])
        self.cursor[shard_id] += taken
        return taken

    def unconsume(self, shard_id: int, worker: NodeId, samples: int):
        """Give back samples whose gradients were discarded; they are read again."""
        state = self.states[shard_id]
        if state.status != ShardStatus.DOING or state.node != worker:
            raise IllegalTransition(f"shard {shard_id} is not held by {worker}")
        if samples > self.cursor[shard_id]:
            raise IllegalTransition(f"shard {shard_id}: cannot return {samples} unread samples")
        self.cursor[shard_id] -= samples

    def remaining(self, shard_id: int) -> int:
        return self.shards[shard_id].length - self.cursor.get(shard_id, 0)

    def report_done(self, shard_id: int, worker: NodeId, now: float):
        state = self.states.get(shard_id)
        if state is None:
            raise IllegalTransition(f"unknown shard {shard_id}")
        if state.status != ShardStatus.DOING:
            raise IllegalTransition(f"shard {shard_id} is {state.status.value}, not doing")
        if state.node != worker:
            raise IllegalTransition(f"shard {shard_id} is held by {state.node}, not {worker}")
        self.states[shard_id] = ShardState(ShardStatus.DONE, worker, now)
        self.done_count += 1
        self.cursor.pop(shard_id, None)
        self._leased.pop(shard_id, None)

    def recover_node(self, node: NodeId) -> int:
        held = sorted(
            (sid for sid, st in self.states.items() if st.status == ShardStatus.DOING and st.node == node),
            key=lambda sid: self._leased[sid],
        )
        for sid in held:
            self.duplicated_samples += self.cursor.pop(sid, 0)
            self._leased.pop(sid)
            self.states[sid] = ShardState.todo()
            self.queue.append(sid)
        if held:
            logger.info("requeued epoch=%d node=%s shards=%s", self.epoch, node, held)
        return len(held)

    def held_by(self, node: NodeId) -> list[Shard]:
        return [self.shards[sid] for sid, st in self.states.items()
                if st.status == ShardStatus.DOING and st.node == node]

    def progress(self) -> tuple[int, int, int]:
        counts = {status: 0 for status in ShardStatus}
        for st in self.states.values():
            counts[st.status] += 1
        return counts[ShardStatus.TODO], counts[ShardStatus.DOING], counts[ShardStatus.DONE]

    def is_complete(self) -> bool:
        return self.done_count == self.k

    def done_ranges(self) -> list[tuple[int, int]]:
        return sorted((self.shards[sid].start, self.shards[sid].end)
                      for sid, st in self.states.items() if st.status == ShardStatus.DONE)

    def done_per_worker(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for st in self.states.values():
            if st.status == ShardStatus.DONE:
                out[st.node.index] = out.get(st.node.index, 0) + 1
        return out

    def to_json(self) -> dict:
        states = {}
        for sid, st in self.states.items():
            states[str(sid)] = {
                "status": st.status.value,
                "node": st.node.to_json() if st.node else None,
                "at": st.at,
                "cursor": self.cursor.get(sid, 0),
                "lease": self._leased.get(sid),
            }
        return {
            "epoch": self.epoch,
            "shards": [[s.id, s.start, s.length] for s in self.shards.values()],
            "order": list(self.order),
            "queue": list(self.queue),
            "states": states,
            "duplicated_samples": self.duplicated_samples,
            "lease_seq": self._lease_seq,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ShardLedger":
        epoch = int(data["epoch"])
        shards = [Shard(int(i), int(s), int(n), epoch) for i, s, n in data["shards"]]
        ledger = cls(shards, [int(i) for i in data["order"]], epoch)
        ledger.queue = deque(int(i) for i in data["queue"])
        for sid, raw in data["states"].items():
            sid = int(sid)
            node = NodeId.from_json(raw["node"]) if raw["node"] else None
            ledger.states[sid] = ShardState(ShardStatus(raw["status"]), node, raw["at"])
            if raw["status"] == ShardStatus.DOING.value:
                ledger.cursor[sid] = int(raw["cursor"])
                ledger._leased[sid] = int(raw["lease"])
        ledger.duplicated_samples = int(data.get("duplicated_samples", 0))
        ledger._lease_seq = int(data.get("lease_seq", 0))
        ledger.done_count = sum(1 for st in ledger.states.values() if st.status == ShardStatus.DONE)
        return ledger


def shard_count(samples: int, batch: int, batches_per_shard: int) -> int:
    if samples < 1 or batch < 1 or batches_per_shard < 1:
        raise ConfigurationError("N, B and M must all be positive")
    span = batch * batches_per_shard
    if span > MAX_INT64 or samples > MAX_INT64:
        raise ConfigurationError(f"B·M = {span} overflows 64-bit shard offsets")
    return -(-samples // span)


def build_shards(samples: int, batch: int, batches_per_shard: int, epoch: int, seed: int) -> ShardLedger:
    """K = ceil(N / (B·M)) shards; queue order is a Fisher–Yates shuffle seeded by seed ^ epoch."""
    k = shard_count(samples, batch, batches_per_shard)
    span = batch * batches_per_shard
    shards = [
        Shard(i, i * span, min(span, samples - i * span), epoch)
        for i in range(k)
    ]
    order = list(range(k))
    random.Random(seed ^ epoch).shuffle(order)
    return ShardLedger(shards, order, epoch)


def fetch_shard(ledger: ShardLedger, worker: NodeId, now: float) -> FetchResult:
    return ledger.fetch(worker, now)


def report_done(ledger: ShardLedger, shard_id: int, worker: NodeId, now: float):
    ledger.report_done(shard_id, worker, now)


def recover_node(ledger: ShardLedger, node: NodeId) -> int:
    return ledger.recover_node(node)


def epoch_progress(ledger: ShardLedger) -> tuple[int, int, int]:
    return ledger.progress()


class LedgerSet:
    """
    All epochs of one job. Fetches are served from the lowest epoch that still
    has TODO shards; the next epoch is built once the current queue drains.
    """

    def __init__(self, samples: int, batch: int, batches_per_shard: int, epochs: int, seed: int):
        self.samples = samples
        self.batch = batch
        self.batches_per_shard = batches_per_shard
        self.epochs = epochs
        self.seed = seed
        self.ledgers: dict[int, ShardLedger] = {0: build_shards(samples, batch, batches_per_shard, 0, seed)}

    @property
    def k(self) -> int:
        return self.ledgers[0].k

    def ledger(self, epoch: int) -> ShardLedger:
        return self.ledgers[epoch]

    def _open_ledgers(self):
        newest = max(self.ledgers)
        if not self.ledgers[newest].queue and newest + 1 < self.epochs:
            self.ledgers[newest + 1] = build_shards(
                self.samples, self.batch, self.batches_per_shard, newest + 1, self.seed)
            logger.debug("built epoch=%d", newest + 1)

    def fetch(self, worker: NodeId, now: float) -> FetchResult:
        self._open_ledgers()
        for epoch in sorted(self.ledgers):
            ledger = self.ledgers[epoch]
            if ledger.queue:
                return ledger.fetch(worker, now)
        return EpochExhausted(max(self.ledgers))

    def ensure_epoch(self, epoch: int) -> ShardLedger:
        if epoch not in self.ledgers:
            if epoch >= self.epochs or epoch - 1 not in self.ledgers:
                raise ProtocolError(f"epoch {epoch} is not open")
            self.ledgers[epoch] = build_shards(
                self.samples, self.batch, self.batches_per_shard, epoch, self.seed)
        return self.ledgers[epoch]

    def lease(self, epoch: int, shard_id: int, worker: NodeId, now: float) -> Shard:
        return self.ensure_epoch(epoch).lease(shard_id, worker, now)

    def report_done(self, shard: Shard, worker: NodeId, now: float):
        if shard.epoch not in self.ledgers:
            raise IllegalTransition(f"epoch {shard.epoch} has no ledger")
        self.ledgers[shard.epoch].report_done(shard.id, worker, now)

    def consume(self, shard: Shard, worker: NodeId, samples: int) -> int:
        return self.ledgers[shard.epoch].consume(shard.id, worker, samples)

    def unconsume(self, shard: Shard, worker: NodeId, samples: int):
        self.ledgers[shard.epoch].unconsume(shard.id, worker, samples)

    def remaining(self, shard: Shard) -> int:
        return self.ledgers[shard.epoch].remaining(shard.id)

    def recover_node(self, node: NodeId) -> int:
        return sum(ledger.recover_node(node) for ledger in self.ledgers.values())

    def held_by(self, node: NodeId) -> list[Shard]:
        return [s for ledger in self.ledgers.values() for s in ledger.held_by(node)]

    def progress(self, epoch: Optional[int] = None) -> tuple[int, int, int]:
        if epoch is None:
            epoch = max(self.ledgers)
        return self.ledgers[epoch].progress()

    def is_complete(self) -> bool:
        return len(self.ledgers) == self.epochs and all(l.is_complete() for l in self.ledgers.values())

    @property
    def duplicated_samples(self) -> int:
        return sum(ledger.duplicated_samples for ledger in self.ledgers.values())

    def done_per_worker(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for ledger in self.ledgers.values():
            for worker, count in ledger.done_per_worker().items():
                out[worker] = out.get(worker, 0) + count
        return out

    def to_json(self) -> dict:
        return {
            "samples": self.samples,
            "batch": self.batch,
            "batches_per_shard": self.batches_per_shard,
            "epochs": self.epochs,
            "seed": self.seed,
            "ledgers": [self.ledgers[e].to_json() for e in sorted(self.ledgers)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "LedgerSet":
        out = cls(int(data["samples"]), int(data["batch"]), int(data["batches_per_shard"]),
                  int(data["epochs"]), int(data["seed"]))
        out.ledgers = {}
        for raw in data["ledgers"]:
            ledger = ShardLedger.from_json(raw)
            out.ledgers[ledger.epoch] = ledger
        return out


class DdsService:
    """
    Request/response front of a LedgerSet; every message goes through handle(),
    which is the only mutator. `on_change` is called after each mutation.
    """

    def __init__(self, ledgers: LedgerSet, on_change=None, clock=None):
        self.ledgers = ledgers
        self.on_change = on_change
        # wall clock, so lease times stay comparable across a restart from the database
        self.clock = clock or time.time

    def handle(self, message: dict) -> dict:
        op = message.get("op")
        now = float(message.get("now", self.clock()))
        if op == "fetch":
            result = self.ledgers.fetch(NodeId.worker(int(message["worker"])), now)
            self._changed()
            if isinstance(result, EpochExhausted):
                return {"epoch_end": True}
            return {"shard": result.to_json()}
        if op == "done":
            worker = NodeId.worker(int(message["worker"]))
            epoch = message.get("epoch")
            if epoch is None:
                shard = self._held_shard(worker, int(message["shard"]))
            else:
                ledger = self.ledgers.ledgers.get(int(epoch))
                shard = ledger.shards.get(int(message["shard"])) if ledger else None
                if shard is None:
                    raise IllegalTransition(f"unknown shard {message['shard']} in epoch {epoch}")
            self.ledgers.report_done(shard, worker, now)
            self._changed()
            return {"ok": True}
        if op == "recover":
            requeued = self.ledgers.recover_node(NodeId.from_json(message["node"]))
            self._changed()
            return {"requeued": requeued}
        if op == "progress":
            todo, doing, done = self.ledgers.progress(message.get("epoch"))
            return {"todo": todo, "doing": doing, "done": done}
        raise ProtocolError(f"unknown dds op: {op!r}")

    def _held_shard(self, worker: NodeId, shard_id: int) -> Shard:
        for shard in self.ledgers.held_by(worker):
            if shard.id == shard_id:
                return shard
        raise IllegalTransition(f"shard {shard_id} is not held by {worker}")

    def _changed(self):
        if self.on_change is not None:
            self.on_change(self.ledgers)
