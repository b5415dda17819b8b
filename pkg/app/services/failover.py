"""Cost model for KILL_RESTART and checkpoint-based recovery."""
import logging
from dataclasses import dataclass
from typing import Optional

from app.config import FailoverConfig, RecomputeMode
from app.core import NodeId

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FailoverCost:
    pending: float
    node_init: float
    restore: float
    recompute: float
    # every worker waits: server loss, or a rollback to the last checkpoint
    stalls_all: bool

    @property
    def downtime(self) -> float:
        return self.pending + self.node_init + self.restore


@dataclass
class CheckpointTracker:
    interval: float
    cost: float
    last_end: float = 0.0
    saving_time: float = 0.0
    saves: int = 0
    consumed_since: int = 0

    def next_due(self) -> float:
        return self.last_end + self.interval

    def save(self, now: float) -> float:
        self.saves += 1
        self.saving_time += self.cost
        self.last_end = now + self.cost
        self.consumed_since = 0
        return self.last_end


def kill_restart_cost(
    node: NodeId,
    now: float,
    cfg: FailoverConfig,
    cluster_busy: bool,
    leased_at: Optional[float] = None,
    checkpoint: Optional[CheckpointTracker] = None,
) -> FailoverCost:
    """
    Downtime is pending + init + restore. With DDS recovery only the killed
    worker's open lease is redone; with checkpoint recovery every worker
    redoes everything since the last checkpoint.
    """
    pending = cfg.pending_time_busy if cluster_busy else cfg.pending_time_idle
    if cfg.recompute_mode == RecomputeMode.CHECKPOINT_BASED:
        since = checkpoint.last_end if checkpoint is not None else 0.0
        recompute = max(0.0, now - since)
        stalls_all = True
    else:
        recompute = max(0.0, now - leased_at) if (leased_at is not None and node.is_worker) else 0.0
        stalls_all = not node.is_worker
    cost = FailoverCost(pending, cfg.node_init, cfg.restore, recompute, stalls_all)
    logger.debug("failover node=%s downtime=%.1f recompute=%.1f", node, cost.downtime, recompute)
    return cost
