"""Shared vocabulary: node identities, timing records, mitigation actions."""
import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

US_PER_SECOND = 1_000_000


def to_us(seconds: float) -> int:
    """Seconds to fixed-point microseconds of the event clock."""
    return int(round(seconds * US_PER_SECOND))


def to_seconds(us: int) -> float:
    return us / US_PER_SECOND


class Role(str, enum.Enum):
    WORKER = "worker"
    SERVER = "server"


class Consistency(str, enum.Enum):
    BSP = "bsp"
    ASP = "asp"


class Architecture(str, enum.Enum):
    PARAMETER_SERVER = "parameter_server"
    ALL_REDUCE = "all_reduce"


class Policy(str, enum.Enum):
    NATIVE_BSP = "native_bsp"
    NATIVE_ASP = "native_asp"
    ASP_DDS = "asp_dds"
    BACKUP_WORKERS = "backup_workers"
    LB_BSP = "lb_bsp"
    ANTDT_ND = "antdt_nd"
    ANTDT_DD = "antdt_dd"


BASELINE_POLICIES = {
    Policy.NATIVE_BSP,
    Policy.NATIVE_ASP,
    Policy.ASP_DDS,
    Policy.BACKUP_WORKERS,
    Policy.LB_BSP,
}


@dataclass(frozen=True, order=True)
class NodeId:
    role: Role
    index: int

    @classmethod
    def worker(cls, index: int) -> "NodeId":
        return cls(Role.WORKER, index)

    @classmethod
    def server(cls, index: int) -> "NodeId":
        return cls(Role.SERVER, index)

    @property
    def is_worker(self) -> bool:
        return self.role == Role.WORKER

    def to_json(self) -> list:
        return [self.role.value, self.index]

    @classmethod
    def from_json(cls, data) -> "NodeId":
        role, index = data
        return cls(Role(role), int(index))

    def __str__(self) -> str:
        prefix = "worker" if self.is_worker else "ps"
        return f"{prefix}-{self.index}"


@dataclass(frozen=True)
class IterationRecord:
    node: NodeId
    iteration: int
    wall_time: float
    worker_compute: float = 0.0
    server_compute: float = 0.0
    comm: float = 0.0
    batch_size: int = 0
    accum_steps: int = 1

    def __post_init__(self):
        if min(self.worker_compute, self.server_compute, self.comm) < 0:
            raise ValueError(f"negative duration in record for {self.node}")
        if self.node.is_worker and self.batch_size < 1:
            raise ValueError(f"worker record for {self.node} needs batch_size >= 1")

    @property
    def samples(self) -> int:
        return self.batch_size * self.accum_steps

    def to_json(self) -> dict:
        return {
            "node": self.node.to_json(),
            "iteration": self.iteration,
            "wall_time": self.wall_time,
            "worker_compute": self.worker_compute,
            "server_compute": self.server_compute,
            "comm": self.comm,
            "batch_size": self.batch_size,
            "accum_steps": self.accum_steps,
        }

    @classmethod
    def from_json(cls, data: dict) -> "IterationRecord":
        return cls(
            node=NodeId.from_json(data["node"]),
            iteration=int(data["iteration"]),
            wall_time=float(data["wall_time"]),
            worker_compute=float(data.get("worker_compute", 0.0)),
            server_compute=float(data.get("server_compute", 0.0)),
            comm=float(data.get("comm", 0.0)),
            batch_size=int(data.get("batch_size", 0)),
            accum_steps=int(data.get("accum_steps", 1)),
        )


@dataclass(frozen=True)
class WorkerBatch:
    worker: int
    batch_size: int
    accum_steps: int = 1

    @property
    def samples(self) -> int:
        return self.batch_size * self.accum_steps


@dataclass(frozen=True)
class BatchAllocation:
    per_worker: tuple[WorkerBatch, ...]

    @classmethod
    def even(cls, workers: list[int], global_batch: int) -> "BatchAllocation":
        """B/n each; the first B mod n workers take one extra sample."""
        base, extra = divmod(global_batch, len(workers))
        return cls(tuple(
            WorkerBatch(w, base + (1 if pos < extra else 0))
            for pos, w in enumerate(sorted(workers))
        ))

    def total(self) -> int:
        return sum(entry.samples for entry in self.per_worker)

    def workers(self) -> list[int]:
        return [entry.worker for entry in self.per_worker]

    def for_worker(self, worker: int) -> Optional[WorkerBatch]:
        for entry in self.per_worker:
            if entry.worker == worker:
                return entry
        return None

    def violations(self, global_batch: int) -> list[str]:
        problems = []
        if any(e.batch_size < 1 or e.accum_steps < 1 for e in self.per_worker):
            problems.append("every batch_size and accum_steps must be >= 1")
        if self.total() != global_batch:
            problems.append(f"allocation sums to {self.total()}, expected {global_batch}")
        return problems

    def to_json(self) -> list:
        return [[e.worker, e.batch_size, e.accum_steps] for e in self.per_worker]

    @classmethod
    def from_json(cls, data) -> "BatchAllocation":
        return cls(tuple(WorkerBatch(int(w), int(b), int(c)) for w, b, c in data))


class ActionKind(str, enum.Enum):
    ADJUST_BS = "ADJUST_BS"
    BACKUP_WORKERS = "BACKUP_WORKERS"
    KILL_RESTART = "KILL_RESTART"
    ADJUST_LR = "ADJUST_LR"
    NONE = "NONE"


GLOBAL_ACTIONS = {ActionKind.ADJUST_BS, ActionKind.BACKUP_WORKERS, ActionKind.ADJUST_LR}


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    issue_iteration: int = 0
    allocation: Optional[BatchAllocation] = None
    backup: Optional[int] = None
    target: Optional[NodeId] = None
    lr_scale: Optional[tuple[tuple[int, Fraction], ...]] = None

    @classmethod
    def none(cls, issue_iteration: int = 0) -> "Action":
        return cls(ActionKind.NONE, issue_iteration)

    @classmethod
    def adjust_bs(cls, allocation: BatchAllocation, issue_iteration: int = 0) -> "Action":
        return cls(ActionKind.ADJUST_BS, issue_iteration, allocation=allocation)

    @classmethod
    def backup_workers(cls, b: int, issue_iteration: int = 0) -> "Action":
        if b < 1:
            raise ValueError("backup count must be positive")
        return cls(ActionKind.BACKUP_WORKERS, issue_iteration, backup=b)

    @classmethod
    def kill_restart(cls, target: NodeId, issue_iteration: int = 0) -> "Action":
        return cls(ActionKind.KILL_RESTART, issue_iteration, target=target)

    @classmethod
    def adjust_lr(cls, scales: dict[int, Fraction], issue_iteration: int = 0) -> "Action":
        if any(s <= 0 for s in scales.values()):
            raise ValueError("learning-rate scales must be positive")
        return cls(ActionKind.ADJUST_LR, issue_iteration,
                   lr_scale=tuple(sorted((w, Fraction(s)) for w, s in scales.items())))

    @property
    def is_none(self) -> bool:
        return self.kind == ActionKind.NONE

    @property
    def is_global(self) -> bool:
        return self.kind in GLOBAL_ACTIONS

    def to_json(self) -> dict:
        data = {"kind": self.kind.value, "issue_iteration": self.issue_iteration}
        if self.allocation is not None:
            data["allocation"] = self.allocation.to_json()
        if self.backup is not None:
            data["backup"] = self.backup
        if self.target is not None:
            data["target"] = self.target.to_json()
        if self.lr_scale is not None:
            # rationals travel as "num/den" strings so they survive JSON unchanged
            data["lr_scale"] = [[w, f"{s.numerator}/{s.denominator}"] for w, s in self.lr_scale]
        return data

    @classmethod
    def from_json(cls, data: dict) -> "Action":
        return cls(
            kind=ActionKind(data["kind"]),
            issue_iteration=int(data.get("issue_iteration", 0)),
            allocation=BatchAllocation.from_json(data["allocation"]) if "allocation" in data else None,
            backup=data.get("backup"),
            target=NodeId.from_json(data["target"]) if "target" in data else None,
            lr_scale=tuple((int(w), Fraction(s)) for w, s in data["lr_scale"]) if "lr_scale" in data else None,
        )


@dataclass
class EventLog:
    """Append-only run trace; one dict per event, serialized as JSON Lines."""
    events: list[dict] = field(default_factory=list)

    def emit(self, t_us: int, kind: str, node: Optional[NodeId] = None, /, **payload):
        self.events.append({
            "t": round(to_seconds(t_us), 6),
            "kind": kind,
            "node": str(node) if node is not None else None,
            "payload": payload,
        })

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]


class ErrorCause(str, enum.Enum):
    PROACTIVE_KILL = "proactive_kill"
    NETWORK_ERROR = "network_error"
    EVICTION = "eviction"
    CONFIG_ERROR = "config_error"
    PROGRAM_ERROR = "program_error"


RETRYABLE_CAUSES = {ErrorCause.PROACTIVE_KILL, ErrorCause.NETWORK_ERROR, ErrorCause.EVICTION}
