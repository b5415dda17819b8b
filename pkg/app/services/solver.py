"""
Batch allocation solvers.

solve_batch splits a global batch across n workers to minimise the slowest
worker's compute time max(B_i / v_i). solve_grad_accum does the same for
device classes that may also accumulate C_i micro-batches per sync, with
Σ n_i·C_i·B_i = B.

Both work in exact rationals; speeds given as floats are converted without
rounding.
"""
import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from app.core import BatchAllocation, WorkerBatch
from app.errors import Infeasible

logger = logging.getLogger(__name__)

MIN_SPEED = Fraction(1, 10**9)


def _speed(v) -> Fraction:
    v = Fraction(v)
    return v if v >= MIN_SPEED else MIN_SPEED


@dataclass(frozen=True)
class BatchProblem:
    global_batch: int
    speeds: Sequence[float]
    caps: Optional[Sequence[int]] = None
    workers: Optional[Sequence[int]] = None

    def worker_ids(self) -> list[int]:
        return list(self.workers) if self.workers is not None else list(range(len(self.speeds)))


@dataclass(frozen=True)
class DeviceSpec:
    count: int
    speed: float
    b_min: int = 1
    b_max: int = 1_000_000


@dataclass(frozen=True)
class GradAccumProblem:
    global_batch: int
    classes: Sequence[DeviceSpec]
    c_min: int = 1
    c_max: int = 5
    workers: Optional[Sequence[int]] = None

    def worker_ids(self) -> list[int]:
        n = sum(c.count for c in self.classes)
        return list(self.workers) if self.workers is not None else list(range(n))


@dataclass(frozen=True)
class AllocationSolution:
    allocation: BatchAllocation
    objective_z: float
    z_exact: Fraction
    # per device class (B_i, C_i); empty for solve_batch
    class_plan: tuple[tuple[int, int], ...] = field(default_factory=tuple)


def continuous_relaxation(problem: BatchProblem) -> list[Fraction]:
    speeds = [_speed(v) for v in problem.speeds]
    total = sum(speeds)
    return [Fraction(problem.global_batch) * v / total for v in speeds]


def solve_batch(problem: BatchProblem) -> AllocationSolution:
    n = len(problem.speeds)
    B = problem.global_batch
    if n < 1:
        raise Infeasible("no workers to allocate to")
    caps = list(problem.caps) if problem.caps is not None else [B] * n
    if B < n:
        raise Infeasible(f"B={B} is smaller than n={n}", nearest=(None, n))
    if B > sum(caps):
        raise Infeasible(f"B={B} exceeds the combined cap {sum(caps)}", nearest=(sum(caps), None))
    if min(caps) < 1:
        raise Infeasible("every worker cap must allow at least one sample")

    speeds = [_speed(v) for v in problem.speeds]
    # warm start: every unit whose finish time is strictly below (B-n)/Σv is
    # in any greedy optimum
    tau = Fraction(B - n) / sum(speeds)
    alloc = [max(1, min(cap, math.ceil(tau * v) - 1)) for v, cap in zip(speeds, caps)]

    heap = [(Fraction(alloc[i] + 1) / speeds[i], i) for i in range(n) if alloc[i] < caps[i]]
    heapq.heapify(heap)
    for _ in range(B - sum(alloc)):
        _, i = heapq.heappop(heap)
        alloc[i] += 1
        if alloc[i] < caps[i]:
            heapq.heappush(heap, (Fraction(alloc[i] + 1) / speeds[i], i))

    z = max(Fraction(b) / v for b, v in zip(alloc, speeds))
    ids = problem.worker_ids()
    allocation = BatchAllocation(tuple(WorkerBatch(w, b) for w, b in zip(ids, alloc)))
    return AllocationSolution(allocation, float(z), z)


def _spread(reach: int, step: int, lo: int, hi: int, limit_mask: int) -> int:
    """OR of reach shifted by step·b for every b in [lo, hi], cut at limit_mask."""
    count = hi - lo + 1
    acc = reach
    covered = 1
    while covered < count:
        grow = min(covered, count - covered)
        acc |= acc << (step * grow)
        acc &= limit_mask
        covered += grow
    return (acc << (step * lo)) & limit_mask


def _layers(steps: list[int], bounds: list[tuple[int, int]], limit_mask: int) -> list[int]:
    layers = [1]
    for step, (lo, hi) in zip(steps, bounds):
        layers.append(_spread(layers[-1], step, lo, hi, limit_mask) if lo <= hi else 0)
    return layers


def _feasible(steps, bounds, target: int) -> bool:
    mask = (1 << (target + 1)) - 1
    return bool(_layers(steps, bounds, mask)[-1] >> target & 1)


def _backtrack(steps, bounds, target: int) -> list[int]:
    mask = (1 << (target + 1)) - 1
    layers = _layers(steps, bounds, mask)
    picks = [0] * len(steps)
    remaining = target
    for i in range(len(steps) - 1, -1, -1):
        lo, hi = bounds[i]
        for b in range(hi, lo - 1, -1):
            rest = remaining - steps[i] * b
            if rest >= 0 and layers[i] >> rest & 1:
                picks[i] = b
                remaining = rest
                break
    return picks


def _nearest_totals(problem: GradAccumProblem) -> tuple[Optional[int], Optional[int]]:
    top = sum(c.count * problem.c_max * c.b_max for c in problem.classes)
    mask = (1 << (top + 1)) - 1
    reach = 0
    for accum in itertools.product(range(problem.c_min, problem.c_max + 1), repeat=len(problem.classes)):
        steps = [c.count * a for c, a in zip(problem.classes, accum)]
        reach |= _layers(steps, [(c.b_min, c.b_max) for c in problem.classes], mask)[-1]
    B = problem.global_batch
    below = reach & ((1 << B) - 1)
    above = reach >> (B + 1)
    lower = below.bit_length() - 1 if below else None
    upper = B + 1 + ((above & -above).bit_length() - 1) if above else None
    return lower, upper


def solve_grad_accum(problem: GradAccumProblem) -> AllocationSolution:
    classes = list(problem.classes)
    B = problem.global_batch
    if not classes:
        raise Infeasible("no device classes")
    for c in classes:
        if not (1 <= c.b_min <= c.b_max) or c.count < 1:
            raise Infeasible(f"bad device class {c}")
    if not (1 <= problem.c_min <= problem.c_max):
        raise Infeasible("need 1 <= c_min <= c_max")

    speeds = [_speed(c.speed) for c in classes]
    floor_z = Fraction(B) / sum(c.count * v for c, v in zip(classes, speeds))
    best: Optional[tuple[Fraction, tuple[int, ...], list[int]]] = None

    for accum in itertools.product(range(problem.c_min, problem.c_max + 1), repeat=len(classes)):
        lower = max([floor_z] + [a * c.b_min / v for a, c, v in zip(accum, classes, speeds)])
        if best is not None and lower >= best[0]:
            continue
        steps = [c.count * a for c, a in zip(classes, accum)]

        def bounds_at(z: Fraction) -> list[tuple[int, int]]:
            return [(c.b_min, min(c.b_max, math.floor(z * v / a))) for a, c, v in zip(accum, classes, speeds)]

        candidates = sorted({a * b / v for a, c, v in zip(accum, classes, speeds)
                             for b in range(c.b_min, c.b_max + 1)})
        if not _feasible(steps, bounds_at(candidates[-1]), B):
            continue
        lo, hi = 0, len(candidates) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if _feasible(steps, bounds_at(candidates[mid]), B):
                hi = mid
            else:
                lo = mid + 1
        z = candidates[lo]
        if best is None or z < best[0]:
            best = (z, accum, _backtrack(steps, bounds_at(z), B))

    if best is None:
        nearest = _nearest_totals(problem)
        raise Infeasible(f"no (B_i, C_i) grid point reaches B={B}", nearest=nearest)

    _, accum, batches = best
    z = max(a * b / v for a, b, v in zip(accum, batches, speeds))
    ids = iter(problem.worker_ids())
    per_worker = []
    for c, a, b in zip(classes, accum, batches):
        for _ in range(c.count):
            per_worker.append(WorkerBatch(next(ids), b, a))
    plan = tuple(zip(batches, accum))
    logger.debug("grad-accum plan=%s z=%s", plan, z)
    return AllocationSolution(BatchAllocation(tuple(per_worker)), float(z), z, plan)


def problem_from_json(data: dict):
    """A solve request file: `classes` means a gradient-accumulation problem."""
    if "classes" in data:
        return GradAccumProblem(
            global_batch=int(data["B"]),
            classes=[DeviceSpec(int(c["count"]), float(c["speed"]), int(c.get("b_min", 1)),
                                int(c.get("b_max", 1_000_000))) for c in data["classes"]],
            c_min=int(data.get("c_min", 1)),
            c_max=int(data.get("c_max", 5)),
        )
    return BatchProblem(int(data["B"]), [float(v) for v in data["speeds"]],
                        caps=data.get("caps"))


def solve(problem) -> AllocationSolution:
    if isinstance(problem, GradAccumProblem):
        return solve_grad_accum(problem)
    return solve_batch(problem)


def solution_to_json(solution: AllocationSolution) -> dict:
    out = {"allocation": solution.allocation.to_json(), "z": solution.objective_z}
    if solution.class_plan:
        out["classes"] = [{"batch_size": b, "accum_steps": c} for b, c in solution.class_plan]
    return out
