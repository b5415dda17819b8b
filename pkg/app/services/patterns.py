"""Straggler injection: transient, persistent and deterministic slowdowns."""
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Union

from app.config import (
    DeterministicPattern,
    PersistentPattern,
    ScenarioConfig,
    TransientPattern,
)
from app.core import NodeId

logger = logging.getLogger(__name__)

Pattern = Union[TransientPattern, PersistentPattern, DeterministicPattern]


def node_key(node: NodeId) -> int:
    """Stable across processes, unlike hash() of a str enum."""
    return (0 if node.is_worker else 1_000_003) + node.index * 7919


@dataclass
class TransientDraws:
    """Per (node, pattern) disturbance draws, made one cycle at a time."""
    rng: random.Random
    probability: float
    redraw_each_cycle: bool
    draws: list[bool] = field(default_factory=list)

    def active_in(self, cycle: int) -> bool:
        if not self.redraw_each_cycle:
            cycle = 0
        while len(self.draws) <= cycle:
            self.draws.append(self.rng.random() < self.probability)
        return self.draws[cycle]


class PatternInjector:
    def __init__(self, cfg: ScenarioConfig):
        self.patterns: list[Pattern] = list(cfg.patterns)
        self.seed = cfg.seed
        self.relaunched: set[NodeId] = set()
        self._draws: dict[tuple[NodeId, int], TransientDraws] = {}
        self._index = {id(p): i for i, p in enumerate(self.patterns)}

    def _transient(self, node: NodeId, index: int, pattern: TransientPattern) -> TransientDraws:
        key = (node, index)
        if key not in self._draws:
            rng = random.Random(self.seed ^ node_key(node) ^ (index << 20))
            self._draws[key] = TransientDraws(rng, pattern.probability, pattern.redraw_each_cycle)
        return self._draws[key]

    def inject(self, pattern: Pattern, node: NodeId, t: float) -> float:
        """Additive delay in seconds, or the speed multiplier for deterministic patterns."""
        if isinstance(pattern, DeterministicPattern):
            return pattern.speed_multiplier if pattern.applies_to(node) else 1.0
        if not pattern.applies_to(node):
            return 0.0
        if isinstance(pattern, PersistentPattern):
            return 0.0 if node in self.relaunched else pattern.delay
        index = self._index.get(id(pattern), len(self.patterns))
        cycle = math.floor(t / pattern.cycle)
        if t - cycle * pattern.cycle >= pattern.on_period:
            return 0.0
        return pattern.delay if self._transient(node, index, pattern).active_in(cycle) else 0.0

    def compute_delay(self, node: NodeId, t: float) -> float:
        total = 0.0
        for p in self.patterns:
            if isinstance(p, TransientPattern) or (isinstance(p, PersistentPattern) and p.channel == "compute"):
                total += self.inject(p, node, t)
        return total

    def comm_delay(self, node: NodeId, t: float) -> tuple[float, float]:
        """(multiplier on the base comm time, extra comm delay)."""
        extra = 0.0
        for p in self.patterns:
            if isinstance(p, PersistentPattern) and p.channel == "comm":
                extra += self.inject(p, node, t)
        return (2.0, extra) if extra > 0 else (1.0, 0.0)

    def speed_multiplier(self, node: NodeId) -> float:
        factor = 1.0
        for p in self.patterns:
            if isinstance(p, DeterministicPattern):
                factor *= self.inject(p, node, 0.0)
        return factor

    def relaunch(self, node: NodeId):
        """A relaunched node lands on a fresh host; its persistent contention is gone."""
        self.relaunched.add(node)
