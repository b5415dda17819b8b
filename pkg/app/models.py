from sqlalchemy import Column, Integer, BigInteger, String, Float, Text, DateTime, ForeignKey, Index
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func
from app.database import Base


class LedgerRow(Base):
    """One epoch of one job's shard ledger."""
    __tablename__ = "ledgers"

    id = Column(Integer, primary_key=True, index=True)
    job = Column(String(100), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    queue = Column(Text, nullable=False)  # JSON list of TODO shard ids, head first
    shard_order = Column(Text, nullable=False)  # JSON list, the shuffled build order
    lease_seq = Column(Integer, default=0)
    duplicated_samples = Column(BigInteger, default=0)
    updated_at = Column(DateTime(timezone=True), server_default=func.now(), onupdate=func.now())

    # Relationships
    shards = relationship("ShardRow", back_populates="ledger", order_by="ShardRow.shard_id",
                          cascade="all, delete-orphan")

    __table_args__ = (
        Index("ix_ledger_job_epoch", "job", "epoch", unique=True),
    )


class JobRow(Base):
    """Sharding parameters of a job, needed to rebuild later epochs."""
    __tablename__ = "jobs"

    job = Column(String(100), primary_key=True)
    samples = Column(BigInteger, nullable=False)
    batch = Column(BigInteger, nullable=False)
    batches_per_shard = Column(Integer, nullable=False)
    epochs = Column(Integer, nullable=False)
    seed = Column(BigInteger, nullable=False)


class ShardRow(Base):
    __tablename__ = "shards"

    id = Column(Integer, primary_key=True, index=True)
    ledger_id = Column(Integer, ForeignKey("ledgers.id"), nullable=False, index=True)
    shard_id = Column(Integer, nullable=False)
    start = Column(BigInteger, nullable=False)
    length = Column(BigInteger, nullable=False)
    status = Column(String(10), nullable=False)  # todo / doing / done
    node = Column(String(30))  # JSON [role, index] of holder or finisher
    at = Column(Float)
    cursor = Column(BigInteger, default=0)
    lease = Column(Integer)

    # Relationships
    ledger = relationship("LedgerRow", back_populates="shards")

    __table_args__ = (
        Index("ix_shard_ledger_shard", "ledger_id", "shard_id", unique=True),
    )
