import os
import threading
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict
from dotenv import load_dotenv

from app.config import ScenarioConfig, catalog
from app.core import BatchAllocation, NodeId
from app.database import SessionLocal, init_db
from app.errors import ConfigurationError, ProtocolError, StragglerError
from app.services.agent import AgentService, InProcessSink, build_agent_group
from app.services.dds import DdsService, LedgerSet
from app.services.ledger_store import load_ledgers, save_ledgers
from app.services.monitor import Monitor, MonitorService

load_dotenv()

DEFAULT_PRESET = os.getenv("ANTDT_PRESET", "nd-worker-si08")
DEFAULT_JOB = os.getenv("ANTDT_JOB", "default")

app = FastAPI(title="AntDT", description="Straggler mitigation control plane")


# Pydantic models for API requests
class DdsRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    op: str
    worker: Optional[int] = None
    shard: Optional[int] = None
    epoch: Optional[int] = None
    node: Optional[list] = None
    now: Optional[float] = None


class MonitorRequest(BaseModel):
    # ingest carries the record fields inline
    model_config = ConfigDict(extra="allow")

    op: str


class AgentRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    op: str
    action: Optional[dict] = None
    iteration: Optional[int] = None


@dataclass
class ServiceState:
    job: str
    cfg: ScenarioConfig
    dds: DdsService
    monitor: MonitorService
    agent: AgentService


state: Optional[ServiceState] = None
# every mutation goes through one owner at a time
_lock = threading.Lock()


def configure(cfg: ScenarioConfig, job: str = DEFAULT_JOB, persist: bool = True,
              session_factory=SessionLocal) -> ServiceState:
    """Build the services for one job; with persist, the ledger lives in the database."""
    global state
    ledgers = None
    on_change = None
    if persist:
        db = session_factory()
        ledgers = load_ledgers(db, job)

        def on_change(current: LedgerSet):
            save_ledgers(db, job, current)

    if ledgers is None:
        ledgers = LedgerSet(cfg.samples, cfg.global_batch, cfg.batches_per_shard, cfg.epochs, cfg.seed)
        if on_change is not None:
            on_change(ledgers)

    monitor = Monitor(cfg.detection.window_persistent, cfg.detection.busy_threshold)
    monitor.register(cfg.workers() + cfg.servers())
    workers = list(range(cfg.n_workers))
    even = BatchAllocation.even(workers, cfg.global_batch)
    group = build_agent_group(workers, InProcessSink(monitor), cfg.detection.report_every,
                              {w: even.for_worker(w).batch_size for w in workers}, cfg.sync_lead)
    state = ServiceState(job, cfg, DdsService(ledgers, on_change), MonitorService(monitor), AgentService(group))
    return state


def get_state() -> ServiceState:
    if state is None:
        preset = catalog.get_preset(DEFAULT_PRESET)
        if preset is None:
            raise ConfigurationError(f"unknown preset: {DEFAULT_PRESET}")
        configure(preset.cfg)
    return state


@app.exception_handler(StragglerError)
async def straggler_error_handler(request: Request, exc: StragglerError):
    status = 409 if isinstance(exc, ProtocolError) else 400
    return JSONResponse(status_code=status, content={"error": str(exc), "type": type(exc).__name__})


@app.on_event("startup")
async def startup():
    init_db()


@app.get("/health")
def health():
    with _lock:
        current = get_state()
        todo, doing, done = current.dds.ledgers.progress()
    return {"status": "ok", "job": current.job, "progress": {"todo": todo, "doing": doing, "done": done}}


@app.post("/dds")
def dds(request: DdsRequest):
    """fetch / done / recover / progress against the job's shard ledger."""
    with _lock:
        return get_state().dds.handle(request.model_dump(exclude_none=True))


@app.post("/monitor")
def monitor(request: MonitorRequest):
    with _lock:
        return get_state().monitor.handle(request.model_dump())


@app.post("/agent")
def agent(request: AgentRequest):
    with _lock:
        return get_state().agent.handle(request.model_dump(exclude_none=True))


@app.get("/monitor/signal")
def cluster_signal():
    with _lock:
        signal = get_state().monitor.monitor.cluster_signal()
    return {"pending_time": signal.pending_time, "busy": signal.busy}


@app.get("/dds/held/{worker}")
def held_shards(worker: int):
    with _lock:
        shards = get_state().dds.ledgers.held_by(NodeId.worker(worker))
        return {"shards": [s.to_json() for s in shards]}
