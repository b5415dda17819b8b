import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

from app.config import ScenarioConfig
from app.core import Action, Consistency, NodeId, Policy, Role
from app.errors import Infeasible
from app.services.monitor import Monitor
from app.services.solver import (
    BatchProblem,
    DeviceSpec,
    GradAccumProblem,
    solve_batch,
    solve_grad_accum,
)

logger = logging.getLogger(__name__)


class WindowKind(str, enum.Enum):
    TRANSIENT = "transient"
    PERSISTENT = "persistent"


@dataclass(frozen=True)
class StragglerVerdict:
    node: NodeId
    kind: WindowKind
    observed_bpt: float
    fleet_bpt: float

    @property
    def ratio(self) -> float:
        return self.observed_bpt / self.fleet_bpt if self.fleet_bpt > 0 else float("inf")


@dataclass
class PolicyState:
    policy: Policy
    last_action_at: Optional[float] = None
    kill_cooldown_until: dict[NodeId, float] = field(default_factory=dict)
    dd_adjusted: bool = False


class Controller:
    """Turns monitor snapshots into mitigation actions for one job."""

    def __init__(self, cfg: ScenarioConfig, monitor: Monitor):
        self.cfg = cfg
        self.monitor = monitor
        self.detection = cfg.detection
        self.state = PolicyState(cfg.policy)
        self._killed_at: dict[NodeId, float] = {}

    def _horizon(self, window: WindowKind) -> float:
        if window == WindowKind.TRANSIENT:
            return self.detection.window_transient
        return self.detection.window_persistent

    def in_cooldown(self, node: NodeId, now: float) -> bool:
        launched = self.monitor.launched_at.get(node)
        if launched is not None and launched >= self._killed_at.get(node, float("-inf")):
            self.state.kill_cooldown_until[node] = launched + self.detection.window_persistent
        return now < self.state.kill_cooldown_until.get(node, float("-inf"))

    def _eligible(self, node: NodeId, now: float) -> bool:
        return self.monitor.is_live(node) and not self.in_cooldown(node, now)

    def detect(self, role: Role, window: WindowKind, now: float) -> list[StragglerVerdict]:
        """Flagged nodes only: mean BPT over the window ≥ λ × fleet mean."""
        horizon = self._horizon(window)
        means = {n: m for n, m in self.monitor.node_means(role, horizon, now).items()
                 if self.monitor.is_live(n)}
        if not means:
            return []
        fleet = sum(means.values()) / len(means)
        if fleet <= 0:
            return []
        return [
            StragglerVerdict(node, window, mean, fleet)
            for node, mean in sorted(means.items())
            if mean >= self.detection.lambda_ * fleet and not self.in_cooldown(node, now)
        ]

    def _persistent(self, role: Role, now: float) -> list[StragglerVerdict]:
        # the long window is not meaningful before it has filled once
        if now < self.detection.window_persistent:
            return []
        return self.detect(role, WindowKind.PERSISTENT, now)

    def _kill_worst(self, verdicts: list[StragglerVerdict], now: float) -> Optional[Action]:
        if not verdicts or self.monitor.cluster_signal().busy:
            return None
        candidates = [v for v in verdicts if self._eligible(v.node, now)]
        if not candidates:
            return None
        worst = max(candidates, key=lambda v: (v.ratio, -v.node.index))
        logger.info("kill_restart node=%s ratio=%.2f t=%.1f", worst.node, worst.ratio, now)
        # blocks re-detection until the relaunch resets the cooldown
        self.state.kill_cooldown_until[worst.node] = float("inf")
        self._killed_at[worst.node] = now
        return Action.kill_restart(worst.node)

    def _live_workers(self) -> list[int]:
        return [w for w in range(self.cfg.n_workers) if self.monitor.is_live(NodeId.worker(w))]

    def _rebalance(self, now: float) -> Optional[Action]:
        workers = self._live_workers()
        horizon = self.detection.window_transient
        speeds = {w: self.monitor.throughput(NodeId.worker(w), horizon, now) for w in workers}
        known = [v for v in speeds.values() if v is not None]
        if not known:
            return None
        # a cold node is assumed to run at the fleet average
        fallback = sum(known) / len(known)
        caps = None
        if self.cfg.devices:
            caps = [self.cfg.device_of(w).b_max for w in workers]
        problem = BatchProblem(
            self.cfg.global_batch,
            [speeds[w] if speeds[w] is not None else fallback for w in workers],
            caps=caps,
            workers=workers,
        )
        try:
            solution = solve_batch(problem)
        except Infeasible as exc:
            logger.warning("adjust_bs skipped: %s", exc)
            return None
        if solution.allocation.violations(self.cfg.global_batch):
            logger.error("adjust_bs rejected: %s", solution.allocation.violations(self.cfg.global_batch))
            return None
        return Action.adjust_bs(solution.allocation)

    def nd_worker_step(self, now: float, allow_kill: bool = True) -> Action:
        persistent = self._persistent(Role.WORKER, now)
        if allow_kill:
            candidates = persistent
            if self.cfg.consistency == Consistency.ASP:
                # asynchronous workers are killed only while still slow in the short window
                still_slow = {v.node for v in self.detect(Role.WORKER, WindowKind.TRANSIENT, now)}
                candidates = [v for v in persistent if v.node in still_slow]
            kill = self._kill_worst(candidates, now)
            if kill is not None:
                return kill
        if self.cfg.consistency == Consistency.BSP:
            transient = self.detect(Role.WORKER, WindowKind.TRANSIENT, now)
            if transient or persistent:
                action = self._rebalance(now)
                if action is not None:
                    return action
        return Action.none()

    def nd_server_step(self, now: float) -> Action:
        kill = self._kill_worst(self._persistent(Role.SERVER, now), now)
        return kill if kill is not None else Action.none()

    def dd_step(self, now: float) -> Action:
        if self.state.dd_adjusted:
            return Action.none()
        horizon = self.detection.window_transient
        workers = self._live_workers()
        classes = []
        ids = []
        start = 0
        for device in self.cfg.devices:
            members = [w for w in range(start, start + device.count) if w in workers]
            start += device.count
            rates = [self.monitor.throughput(NodeId.worker(w), horizon, now) for w in members]
            rates = [r for r in rates if r is not None]
            if not members:
                continue
            if not rates:
                logger.debug("dd waiting for throughput of class=%s", device.name)
                return Action.none()
            classes.append(DeviceSpec(len(members), sum(rates) / len(rates), device.b_min, device.b_max))
            ids.extend(members)
        problem = GradAccumProblem(self.cfg.global_batch, classes,
                                   self.cfg.accum_min, self.cfg.accum_max, workers=ids)
        try:
            solution = solve_grad_accum(problem)
        except Infeasible as exc:
            logger.warning("dd adjustment infeasible: %s nearest=%s", exc, exc.nearest)
            return Action.none()
        self.state.dd_adjusted = True
        logger.info("dd plan=%s z=%.4f", solution.class_plan, solution.objective_z)
        return Action.adjust_bs(solution.allocation)

    def baseline_step(self, policy: Policy, now: float) -> Action:
        if policy == Policy.BACKUP_WORKERS:
            return Action.backup_workers(self.cfg.backup_workers)
        if policy == Policy.LB_BSP:
            if self.detect(Role.WORKER, WindowKind.TRANSIENT, now):
                action = self._rebalance(now)
                if action is not None:
                    return action
        return Action.none()

    def step(self, now: float) -> list[Action]:
        """One controller tick; at most one kill is issued per tick."""
        policy = self.state.policy
        if policy == Policy.ANTDT_ND:
            actions = []
            server = self.nd_server_step(now) if self.cfg.n_servers else Action.none()
            if not server.is_none:
                actions.append(server)
            actions.append(self.nd_worker_step(now, allow_kill=server.is_none))
        elif policy == Policy.ANTDT_DD:
            actions = [self.dd_step(now)]
        else:
            actions = [self.baseline_step(policy, now)]
        actions = [a for a in actions if not a.is_none]
        if actions:
            self.state.last_action_at = now
        return actions
