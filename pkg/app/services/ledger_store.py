"""Durable copy of a job's shard ledgers so dds-serve survives restarts."""
import json
import logging
from typing import Optional

from sqlalchemy.orm import Session

from app.models import JobRow, LedgerRow, ShardRow
from app.services.dds import LedgerSet, ShardLedger

logger = logging.getLogger(__name__)


def save_ledgers(db: Session, job: str, ledgers: LedgerSet):
    """Write the full state of every epoch; rows are replaced in place."""
    data = ledgers.to_json()
    job_row = db.get(JobRow, job)
    if job_row is None:
        db.add(JobRow(job=job, samples=data["samples"], batch=data["batch"],
                      batches_per_shard=data["batches_per_shard"], epochs=data["epochs"], seed=data["seed"]))

    for raw in data["ledgers"]:
        row = db.query(LedgerRow).filter(LedgerRow.job == job, LedgerRow.epoch == raw["epoch"]).first()
        if row is None:
            row = LedgerRow(job=job, epoch=raw["epoch"])
            db.add(row)
        row.queue = json.dumps(raw["queue"])
        row.shard_order = json.dumps(raw["order"])
        row.lease_seq = raw["lease_seq"]
        row.duplicated_samples = raw["duplicated_samples"]

        existing = {s.shard_id: s for s in row.shards}
        for shard_id, start, length in raw["shards"]:
            state = raw["states"][str(shard_id)]
            shard = existing.get(shard_id)
            if shard is None:
                shard = ShardRow(shard_id=shard_id, start=start, length=length)
                row.shards.append(shard)
            shard.status = state["status"]
            shard.node = json.dumps(state["node"]) if state["node"] else None
            shard.at = state["at"]
            shard.cursor = state["cursor"]
            shard.lease = state["lease"]
    db.commit()


def load_ledgers(db: Session, job: str) -> Optional[LedgerSet]:
    job_row = db.get(JobRow, job)
    if job_row is None:
        return None
    rows = db.query(LedgerRow).filter(LedgerRow.job == job).order_by(LedgerRow.epoch).all()
    ledgers = LedgerSet(job_row.samples, job_row.batch, job_row.batches_per_shard, job_row.epochs, job_row.seed)
    ledgers.ledgers = {}
    for row in rows:
        raw = {
            "epoch": row.epoch,
            "shards": [[s.shard_id, s.start, s.length] for s in row.shards],
            "order": json.loads(row.shard_order),
            "queue": json.loads(row.queue),
            "states": {
                str(s.shard_id): {
                    "status": s.status,
                    "node": json.loads(s.node) if s.node else None,
                    "at": s.at,
                    "cursor": s.cursor or 0,
                    "lease": s.lease,
                }
                for s in row.shards
            },
            "duplicated_samples": row.duplicated_samples or 0,
            "lease_seq": row.lease_seq or 0,
        }
        ledger = ShardLedger.from_json(raw)
        ledgers.ledgers[ledger.epoch] = ledger
    if not ledgers.ledgers:
        return None
    logger.info("restored job=%s epochs=%s", job, sorted(ledgers.ledgers))
    return ledgers
