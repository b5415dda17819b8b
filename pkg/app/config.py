import enum
import json
import os
import yaml
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.core import (
    Architecture,
    Consistency,
    ErrorCause,
    NodeId,
    Policy,
    Role,
)
from app.errors import ConfigurationError

load_dotenv()

ROOT_DIR = Path(__file__).resolve().parent.parent
CONFIG_DIR = ROOT_DIR / "config"

MAX_INT64 = 2**63 - 1


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class RecomputeMode(str, enum.Enum):
    DDS_BASED = "dds_based"
    CHECKPOINT_BASED = "checkpoint_based"


Targets = Union[Literal["workers", "servers"], list[tuple[Role, int]]]


class _PatternBase(_Frozen):
    targets: Targets = "workers"

    def applies_to(self, node: NodeId) -> bool:
        if self.targets == "workers":
            return node.is_worker
        if self.targets == "servers":
            return not node.is_worker
        return (node.role, node.index) in {(role, index) for role, index in self.targets}


class TransientPattern(_PatternBase):
    kind: Literal["transient"] = "transient"
    sleep_duration: float
    intensity: float
    on_period: float = 900.0
    cycle: float = 1800.0
    probability: float = 0.3
    redraw_each_cycle: bool = True

    @property
    def delay(self) -> float:
        return self.sleep_duration * self.intensity


class PersistentPattern(_PatternBase):
    kind: Literal["persistent"] = "persistent"
    delay: float
    channel: Literal["compute", "comm"] = "compute"


class DeterministicPattern(_PatternBase):
    kind: Literal["deterministic"] = "deterministic"
    speed_multiplier: float


StragglerPattern = Annotated[
    Union[TransientPattern, PersistentPattern, DeterministicPattern],
    Field(discriminator="kind"),
]


class DetectionConfig(_Frozen):
    lambda_: float = Field(1.5, alias="lambda")
    window_transient: float = 300.0
    window_persistent: float = 600.0
    report_every: int = 10
    act_every: float = 300.0
    busy_threshold: float = 120.0


class InjectedFailure(_Frozen):
    at: float
    node: tuple[Role, int]
    cause: ErrorCause = ErrorCause.EVICTION

    @property
    def node_id(self) -> NodeId:
        return NodeId(self.node[0], self.node[1])


class FailoverConfig(_Frozen):
    pending_time_idle: float = 30.0
    pending_time_busy: float = 1800.0
    node_init: float = 60.0
    restore: float = 30.0
    checkpoint_interval: float = 1800.0
    checkpoint_cost: float = 90.0
    recompute_mode: RecomputeMode = RecomputeMode.DDS_BASED
    failures: list[InjectedFailure] = Field(default_factory=list)


class DeviceClass(_Frozen):
    name: str
    count: int
    speed: float
    b_min: int = 1
    b_max: int = 1_000_000


class ScenarioConfig(_Frozen):
    n_workers: int
    n_servers: int = 0
    global_batch: int
    samples: int
    batches_per_shard: int = 100
    epochs: int = 1
    consistency: Consistency = Consistency.BSP
    architecture: Architecture = Architecture.PARAMETER_SERVER
    policy: Policy = Policy.NATIVE_BSP
    backup_workers: int = 0
    detection: DetectionConfig = Field(default_factory=DetectionConfig)
    patterns: list[StragglerPattern] = Field(default_factory=list)
    failover: FailoverConfig = Field(default_factory=FailoverConfig)
    seed: int = 0
    worker_speed: float = 2048.0
    server_update_cost: float = 0.15
    comm_time: float = 0.05
    asp_contention: float = 0.1
    sync_latency: float = 0.001
    sync_lead: int = 1
    devices: list[DeviceClass] = Field(default_factory=list)
    accum_min: int = 1
    accum_max: int = 5
    busy_windows: list[tuple[float, float]] = Field(default_factory=list)

    def workers(self) -> list[NodeId]:
        return [NodeId.worker(i) for i in range(self.n_workers)]

    def servers(self) -> list[NodeId]:
        return [NodeId.server(j) for j in range(self.n_servers)]

    def device_of(self, worker: int) -> Optional[DeviceClass]:
        upto = 0
        for device in self.devices:
            upto += device.count
            if worker < upto:
                return device
        return None

    def base_speed(self, worker: int) -> float:
        device = self.device_of(worker)
        return device.speed if device else self.worker_speed

    def is_busy(self, t: float) -> bool:
        return any(start <= t < end for start, end in self.busy_windows)

    def pending_time(self, t: float) -> float:
        return self.failover.pending_time_busy if self.is_busy(t) else self.failover.pending_time_idle


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def validate_config(cfg: ScenarioConfig) -> list[Violation]:
    """Every invariant violation in cfg; an empty list means the config is ok."""
    out: list[Violation] = []

    def check(ok: bool, path: str, message: str):
        if not ok:
            out.append(Violation(path, message))

    check(cfg.n_workers >= 1, "n_workers", "at least one worker required")
    if cfg.architecture == Architecture.PARAMETER_SERVER:
        check(cfg.n_servers >= 1, "n_servers", "parameter-server architecture needs at least one server")
    else:
        check(cfg.n_servers == 0, "n_servers", "all-reduce architecture has no servers")
    check(cfg.global_batch >= 1, "global_batch", "B must be positive")
    check(cfg.samples >= cfg.global_batch and cfg.samples >= 1, "samples", "N ≥ B required")
    check(cfg.batches_per_shard >= 1, "batches_per_shard", "M must be positive")
    check(cfg.global_batch * cfg.batches_per_shard <= MAX_INT64, "batches_per_shard",
          "B·M overflows 64-bit shard arithmetic")
    check(cfg.epochs >= 1, "epochs", "at least one epoch required")
    check(cfg.global_batch >= cfg.n_workers, "global_batch", "B must give every worker at least one sample")

    det = cfg.detection
    check(det.lambda_ > 1, "detection.lambda", "lambda must exceed 1")
    check(det.window_transient > 0, "detection.window_transient", "window must be positive")
    check(det.window_transient <= det.window_persistent, "detection.window_persistent",
          "window_transient must not exceed window_persistent")
    check(det.report_every >= 1, "detection.report_every", "must report at least every iteration")
    check(det.act_every > 0, "detection.act_every", "controller period must be positive")
    check(det.busy_threshold >= 0, "detection.busy_threshold", "must be non-negative")

    check(cfg.worker_speed > 0, "worker_speed", "speed must be positive")
    for name in ("server_update_cost", "comm_time", "asp_contention", "sync_latency"):
        check(getattr(cfg, name) >= 0, name, "must be non-negative")
    check(cfg.sync_lead >= 1, "sync_lead", "actions apply at least one iteration ahead")

    if cfg.policy == Policy.BACKUP_WORKERS:
        check(1 <= cfg.backup_workers < cfg.n_workers, "backup_workers", "need 1 ≤ b < n")
    bsp_only = {Policy.NATIVE_BSP, Policy.BACKUP_WORKERS, Policy.LB_BSP, Policy.ANTDT_DD}
    asp_only = {Policy.NATIVE_ASP, Policy.ASP_DDS}
    if cfg.consistency == Consistency.ASP:
        check(cfg.policy not in bsp_only, "policy", f"{cfg.policy.value} requires BSP consistency")
        check(cfg.architecture == Architecture.PARAMETER_SERVER, "architecture",
              "ASP runs on the parameter-server architecture")
    else:
        check(cfg.policy not in asp_only, "policy", f"{cfg.policy.value} requires ASP consistency")
    if cfg.policy == Policy.ANTDT_DD:
        check(bool(cfg.devices), "devices", "antdt_dd needs device classes")

    if cfg.devices:
        check(sum(d.count for d in cfg.devices) == cfg.n_workers, "devices",
              "device counts must add up to n_workers")
        for i, d in enumerate(cfg.devices):
            check(d.count >= 1, f"devices.{i}.count", "count must be positive")
            check(d.speed > 0, f"devices.{i}.speed", "speed must be positive")
            check(1 <= d.b_min <= d.b_max, f"devices.{i}.b_min", "need 1 ≤ b_min ≤ b_max")
    check(1 <= cfg.accum_min <= cfg.accum_max, "accum_min", "need 1 ≤ accum_min ≤ accum_max")

    for i, p in enumerate(cfg.patterns):
        path = f"patterns.{i}"
        if isinstance(p, TransientPattern):
            check(0 <= p.intensity <= 1, f"{path}.intensity", "intensity must lie in [0, 1]")
            check(0 <= p.probability <= 1, f"{path}.probability", "probability must lie in [0, 1]")
            check(p.sleep_duration >= 0, f"{path}.sleep_duration", "must be non-negative")
            check(p.cycle > 0, f"{path}.cycle", "cycle must be positive")
            check(0 <= p.on_period <= p.cycle, f"{path}.on_period", "on_period must fit in the cycle")
        elif isinstance(p, PersistentPattern):
            check(p.delay >= 0, f"{path}.delay", "delay must be non-negative")
        else:
            check(p.speed_multiplier > 0, f"{path}.speed_multiplier", "multiplier must be positive")
        if isinstance(p.targets, list):
            for role, index in p.targets:
                limit = cfg.n_workers if role == Role.WORKER else cfg.n_servers
                check(0 <= index < limit, f"{path}.targets", f"{role.value} {index} out of range")
        elif p.targets == "servers":
            check(cfg.n_servers > 0, f"{path}.targets", "no servers to target")

    fo = cfg.failover
    for name in ("pending_time_idle", "pending_time_busy", "node_init", "restore",
                 "checkpoint_interval", "checkpoint_cost"):
        check(getattr(fo, name) >= 0, f"failover.{name}", "must be non-negative")
    for i, f in enumerate(fo.failures):
        limit = cfg.n_workers if f.node[0] == Role.WORKER else cfg.n_servers
        check(0 <= f.node[1] < limit, f"failover.failures.{i}.node", "node out of range")
        check(f.at >= 0, f"failover.failures.{i}.at", "must be non-negative")
    for i, (start, end) in enumerate(cfg.busy_windows):
        check(0 <= start < end, f"busy_windows.{i}", "need 0 ≤ start < end")
    return out


def _violations_from(exc: ValidationError) -> list[Violation]:
    return [Violation(".".join(str(p) for p in err["loc"]) or "<root>", err["msg"]) for err in exc.errors()]


def parse_scenario(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        violations = _violations_from(exc)
        raise ConfigurationError(f"invalid scenario: {violations[0]}", violations) from exc


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scenario(json.load(f))


def dump_scenario(cfg: ScenarioConfig) -> dict:
    return cfg.model_dump(mode="json", by_alias=True)


def parse_override(item: str) -> tuple[str, Any]:
    """`detection.lambda=1.5` -> ("detection.lambda", 1.5); bare words stay strings."""
    if "=" not in item:
        raise ConfigurationError(f"override must look like key=value: {item}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _set_path(data: dict, dotted: str, value: Any):
    parts = dotted.split(".")
    node = data
    for depth, part in enumerate(parts):
        last = depth == len(parts) - 1
        if isinstance(node, list):
            if not part.isdigit() or int(part) >= len(node):
                raise ConfigurationError(f"unknown override key: {dotted}")
            part = int(part)
        elif not isinstance(node, dict) or part not in node:
            raise ConfigurationError(f"unknown override key: {dotted}")
        if last:
            node[part] = value
        else:
            node = node[part]


def apply_overrides(cfg: ScenarioConfig, overrides) -> ScenarioConfig:
    """Overrides are `key=value` strings or a {dotted key: value} mapping."""
    if not overrides:
        return cfg
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = [parse_override(item) for item in overrides]
    data = dump_scenario(cfg)
    for key, value in items:
        _set_path(data, key, value)
    return parse_scenario(data)


def resolve_seed(cfg: ScenarioConfig) -> ScenarioConfig:
    """ANTDT_SEED from the environment (or .env) wins over the config seed."""
    env_seed = os.getenv("ANTDT_SEED")
    if env_seed is None or env_seed == "":
        return cfg
    return cfg.model_copy(update={"seed": int(env_seed)})


@dataclass
class Preset:
    id: str
    name: str
    description: str
    scenario_file: str
    overrides: dict
    sweep: Optional[dict] = None
    cfg: Optional[ScenarioConfig] = None


class PresetCatalog:
    def __init__(self, config_path: Path = CONFIG_DIR / "config.yaml"):
        self.config_path = Path(config_path)
        self.presets: dict[str, Preset] = {}
        self.load()

    def load(self):
        with open(self.config_path, "r") as f:
            data = yaml.safe_load(f)

        self.presets = {}
        for item in data.get("presets", []):
            if item["id"] in self.presets:
                raise ConfigurationError(f"duplicate preset id: {item['id']}")
            preset = Preset(
                id=item["id"],
                name=item["name"],
                description=item["description"],
                scenario_file=item["scenario_file"],
                overrides=item.get("overrides") or {},
                sweep=item.get("sweep"),
            )
            base = load_scenario(self.config_path.parent / item["scenario_file"])
            preset.cfg = apply_overrides(base, preset.overrides)
            self.presets[item["id"]] = preset

    def get_preset(self, preset_id: str) -> Optional[Preset]:
        return self.presets.get(preset_id)

    def get_all_presets(self) -> list[Preset]:
        return list(self.presets.values())

    def reload(self):
        self.load()


# Global catalogue instance
catalog = PresetCatalog()
