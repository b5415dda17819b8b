import random
import time

import pytest

from app.core import NodeId
from app.errors import ConfigurationError, IllegalTransition, ProtocolError
from app.services.dds import (
    DdsService,
    EpochExhausted,
    LedgerSet,
    Shard,
    ShardLedger,
    ShardStatus,
    build_shards,
    epoch_progress,
    fetch_shard,
    recover_node,
    report_done,
    shard_count,
)

W1 = NodeId.worker(1)
W2 = NodeId.worker(2)


def assert_conserved(ledger: ShardLedger):
    todo, doing, done = ledger.progress()
    assert todo + doing + done == ledger.k
    assert todo == len(ledger.queue)


class TestShardConstruction:
    def test_criteo_shards(self):
        ledger = build_shards(45_000_000, 81_920, 100, epoch=0, seed=7)
        assert ledger.k == 6
        lengths = sorted(s.length for s in ledger.shards.values())
        assert lengths == [4_040_000] + [8_192_000] * 5

    def test_single_full_shard(self):
        ledger = build_shards(300, 3, 100, epoch=0, seed=0)
        assert ledger.k == 1
        shard = ledger.shards[0]
        assert (shard.start, shard.end) == (0, 300)

    def test_short_tail(self):
        ledger = build_shards(10, 3, 1, epoch=0, seed=0)
        assert [ledger.shards[i].length for i in range(4)] == [3, 3, 3, 1]

    def test_shards_cover_dataset_exactly(self):
        ledger = build_shards(1_000_003, 97, 13, epoch=2, seed=11)
        spans = sorted((s.start, s.end) for s in ledger.shards.values())
        assert spans[0][0] == 0
        assert spans[-1][1] == 1_000_003
        for (_, end), (start, _) in zip(spans, spans[1:]):
            assert end == start

    def test_shuffle_is_deterministic(self):
        a = build_shards(100_000, 100, 10, epoch=1, seed=5)
        b = build_shards(100_000, 100, 10, epoch=1, seed=5)
        c = build_shards(100_000, 100, 10, epoch=2, seed=5)
        assert a.order == b.order
        assert a.order != c.order
        assert sorted(a.order) == list(range(a.k))

    @pytest.mark.parametrize("n, b, m", [(0, 1, 1), (10, 0, 1), (10, 1, 0)])
    def test_non_positive_inputs(self, n, b, m):
        with pytest.raises(ConfigurationError):
            shard_count(n, b, m)

    def test_overflow(self):
        with pytest.raises(ConfigurationError):
            shard_count(10, 2**40, 2**40)


class TestLedgerTransitions:
    @pytest.fixture
    def ledger(self):
        return build_shards(45_000_000, 81_920, 100, epoch=0, seed=3)

    def test_fetch_pops_first_in_order(self, ledger):
        first = ledger.order[0]
        shard = fetch_shard(ledger, W1, 0.0)
        assert shard.id == first
        assert ledger.states[first].status == ShardStatus.DOING
        assert ledger.states[first].node == W1
        assert epoch_progress(ledger) == (5, 1, 0)

    def test_exhausted_with_work_in_flight(self):
        ledger = build_shards(20, 5, 2, epoch=0, seed=0)
        fetch_shard(ledger, W1, 0.0)
        fetch_shard(ledger, W2, 0.0)
        assert fetch_shard(ledger, W1, 1.0) == EpochExhausted(0)
        assert ledger.progress() == (0, 2, 0)

    def test_server_cannot_fetch(self, ledger):
        with pytest.raises(ProtocolError):
            ledger.fetch(NodeId.server(0), 0.0)

    def test_done_by_holder(self, ledger):
        shard = ledger.fetch(W1, 0.0)
        report_done(ledger, shard.id, W1, 5.0)
        state = ledger.states[shard.id]
        assert state.status == ShardStatus.DONE
        assert state.node == W1

    def test_done_by_other_worker(self, ledger):
        shard = ledger.fetch(W1, 0.0)
        with pytest.raises(IllegalTransition):
            ledger.report_done(shard.id, W2, 5.0)

    def test_done_is_terminal(self, ledger):
        shard = ledger.fetch(W1, 0.0)
        ledger.report_done(shard.id, W1, 5.0)
        with pytest.raises(IllegalTransition):
            ledger.report_done(shard.id, W1, 6.0)

    def test_done_on_todo(self, ledger):
        with pytest.raises(IllegalTransition):
            ledger.report_done(ledger.order[0], W1, 0.0)

    def test_full_pass(self, ledger):
        assert ledger.progress() == (6, 0, 0)
        while True:
            shard = ledger.fetch(W1, 0.0)
            if isinstance(shard, EpochExhausted):
                break
            ledger.report_done(shard.id, W1, 1.0)
        assert ledger.progress() == (0, 0, 6)
        assert ledger.is_complete()

    def test_recover_requeues_at_tail(self, ledger):
        held = ledger.fetch(W1, 0.0)
        ledger.fetch(W2, 0.0)
        assert recover_node(ledger, W1) == 1
        assert ledger.queue[-1] == held.id
        assert ledger.states[held.id].status == ShardStatus.TODO
        assert_conserved(ledger)

    def test_recover_is_idempotent(self, ledger):
        ledger.fetch(W1, 0.0)
        assert ledger.recover_node(W1) == 1
        assert ledger.recover_node(W1) == 0
        assert ledger.recover_node(W2) == 0

    def test_recover_counts_partial_reads(self, ledger):
        shard = ledger.fetch(W1, 0.0)
        assert ledger.consume(shard.id, W1, 81_920) == 81_920
        ledger.recover_node(W1)
        assert ledger.duplicated_samples == 81_920
        assert ledger.remaining(shard.id) == shard.length

    def test_consume_stops_at_shard_end(self):
        ledger = build_shards(10, 3, 1, epoch=0, seed=0)
        tail = ledger.lease(3, W1, 0.0)
        assert tail.length == 1
        assert ledger.consume(3, W1, 3) == 1
        assert ledger.remaining(3) == 0

    def test_unconsume_returns_samples(self, ledger):
        shard = ledger.fetch(W1, 0.0)
        ledger.consume(shard.id, W1, 500)
        ledger.unconsume(shard.id, W1, 200)
        assert ledger.remaining(shard.id) == shard.length - 300
        with pytest.raises(IllegalTransition):
            ledger.unconsume(shard.id, W1, 400)

    def test_json_restore_keeps_state(self, ledger):
        a = ledger.fetch(W1, 0.0)
        ledger.consume(a.id, W1, 10)
        b = ledger.fetch(W2, 0.0)
        ledger.report_done(b.id, W2, 3.0)
        restored = ShardLedger.from_json(ledger.to_json())
        assert restored.progress() == ledger.progress()
        assert list(restored.queue) == list(ledger.queue)
        assert restored.remaining(a.id) == ledger.remaining(a.id)
        restored.recover_node(W1)
        assert restored.queue[-1] == a.id


class TestChaos:
    def test_random_kills_keep_every_sample_exactly_once(self):
        """Random fetch/done/recover interleavings still finish with disjoint DONE ranges covering [0, N)."""
        rng = random.Random(1234)
        samples = 123_457
        ledger = build_shards(samples, 100, 7, epoch=0, seed=99)
        workers = [NodeId.worker(i) for i in range(6)]
        held: dict[NodeId, list[int]] = {w: [] for w in workers}
        now = 0.0
        while not ledger.is_complete():
            now += 1.0
            worker = rng.choice(workers)
            roll = rng.random()
            if roll < 0.1:
                ledger.recover_node(worker)
                held[worker] = []
            elif roll < 0.55 and held[worker]:
                ledger.report_done(held[worker].pop(0), worker, now)
            else:
                shard = ledger.fetch(worker, now)
                if isinstance(shard, Shard):
                    held[worker].append(shard.id)
            assert_conserved(ledger)

        ranges = ledger.done_ranges()
        assert ranges[0][0] == 0
        assert ranges[-1][1] == samples
        assert all(end == start for (_, end), (start, _) in zip(ranges, ranges[1:]))


class TestLedgerSet:
    def test_epochs_open_in_order(self):
        ledgers = LedgerSet(samples=20, batch=5, batches_per_shard=2, epochs=2, seed=0)
        seen = []
        while True:
            shard = ledgers.fetch(W1, 0.0)
            if isinstance(shard, EpochExhausted):
                break
            seen.append(shard.epoch)
            ledgers.report_done(shard, W1, 0.0)
        assert seen == [0, 0, 1, 1]
        assert ledgers.is_complete()
        assert ledgers.done_per_worker() == {1: 4}

    def test_requeued_shard_of_older_epoch_served_first(self):
        ledgers = LedgerSet(samples=20, batch=5, batches_per_shard=2, epochs=2, seed=0)
        first = ledgers.fetch(W1, 0.0)
        second = ledgers.fetch(W2, 0.0)
        ledgers.report_done(second, W2, 1.0)
        ledgers.recover_node(W1)
        again = ledgers.fetch(W2, 2.0)
        assert (again.epoch, again.id) == (0, first.id)

    def test_lease_beyond_last_epoch(self):
        ledgers = LedgerSet(samples=20, batch=5, batches_per_shard=2, epochs=1, seed=0)
        with pytest.raises(ProtocolError):
            ledgers.lease(1, 0, W1, 0.0)

    def test_json_restore(self):
        ledgers = LedgerSet(samples=100, batch=5, batches_per_shard=2, epochs=2, seed=4)
        shard = ledgers.fetch(W1, 0.0)
        restored = LedgerSet.from_json(ledgers.to_json())
        assert restored.held_by(W1) == [shard]
        assert restored.progress() == ledgers.progress()


class TestDdsService:
    @pytest.fixture
    def service(self):
        changes = []
        ledgers = LedgerSet(samples=10, batch=3, batches_per_shard=1, epochs=1, seed=0)
        service = DdsService(ledgers, on_change=changes.append)
        service.changes = changes
        return service

    def test_message_protocol(self, service):
        reply = service.handle({"op": "fetch", "worker": 1})
        shard = reply["shard"]
        assert set(shard) == {"id", "start", "len", "epoch"}
        assert service.handle({"op": "progress"}) == {"todo": 3, "doing": 1, "done": 0}
        assert service.handle({"op": "done", "worker": 1, "shard": shard["id"]}) == {"ok": True}
        service.handle({"op": "fetch", "worker": 2})
        assert service.handle({"op": "recover", "node": ["worker", 2]}) == {"requeued": 1}
        assert len(service.changes) == 4

    def test_epoch_end(self, service):
        for _ in range(4):
            service.handle({"op": "fetch", "worker": 0})
        assert service.handle({"op": "fetch", "worker": 0}) == {"epoch_end": True}

    def test_done_for_unheld_shard(self, service):
        with pytest.raises(IllegalTransition):
            service.handle({"op": "done", "worker": 1, "shard": 0})

    def test_lease_time_from_clock(self):
        ledgers = LedgerSet(samples=10, batch=3, batches_per_shard=1, epochs=1, seed=0)
        service = DdsService(ledgers, clock=lambda: 1234.5)
        shard = service.handle({"op": "fetch", "worker": 0})["shard"]
        assert ledgers.ledger(0).states[shard["id"]].at == 1234.5
        shard = service.handle({"op": "fetch", "worker": 0, "now": 7.0})["shard"]
        assert ledgers.ledger(0).states[shard["id"]].at == 7.0

    def test_default_clock_is_wall_time(self, monkeypatch):
        monkeypatch.setattr(time, "time", lambda: 1_700_000_000.0)
        ledgers = LedgerSet(samples=10, batch=3, batches_per_shard=1, epochs=1, seed=0)
        shard = DdsService(ledgers).handle({"op": "fetch", "worker": 0})["shard"]
        assert ledgers.ledger(0).states[shard["id"]].at == 1_700_000_000.0

    def test_unknown_op(self, service):
        with pytest.raises(ProtocolError):
            service.handle({"op": "steal"})
