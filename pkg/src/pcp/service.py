"""HTTP face of the interaction layer.

Thin, lossless projections over the engine, router, and recorder: every
mutating endpoint routes one command into the per-instance serialized
stream, surfaces the engine's error taxonomy as stable machine-readable
codes (404 unknown-*, 409 conflicts, 422 malformed), and reports the event
seqs it produced. The event feed is cursor-polled: ordered, gap-free
batches that a client can fold into a view without any other state.

Identity is asserted, not verified: the X-Agent-Id header names the acting
agent and is recorded verbatim in provenance. Mutating endpoints accept an
Idempotency-Key header; replaying a key returns the stored response without
re-running the command.
"""

from __future__ import annotations

import threading
from datetime import timedelta
from typing import Any

from fastapi import FastAPI, Header, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .engine import TaskState
from .errors import PcpError, http_status
from .events import canonical_json, parse_ts
from .model import (
    DEFAULT_VERSION,
    ValidationReport,
    parse_meta_meta_model,
    serialize_meta_meta_model,
)
from .routing import StakeholderAddress, StakeholderKind
from .runtime import Runtime
from .store import import_prov


class CreateInstanceBody(BaseModel):
    model_version: str = DEFAULT_VERSION


class CompleteBody(BaseModel):
    outputs: list[str] = Field(default_factory=list)
    exec_id: str | None = None
    comment: str | None = None


class SkipBody(BaseModel):
    reason: str


class TransitionBody(BaseModel):
    target_phase: str | None = None


class LoopbackBody(BaseModel):
    target_phase: str
    reason: str


class ResolveBody(BaseModel):
    choice: str


class TokenResponseBody(BaseModel):
    payload: dict[str, Any]
    responder: str | None = None


class StakeholderBody(BaseModel):
    id: str
    name: str
    department: str = ""
    endpoint: str
    kind: str = "Department"


class DispatchBody(BaseModel):
    destination: str
    text: str
    expected_kind: str = "document"
    deadline: str | None = None
    deadline_s: float | None = None


class ExpireBody(BaseModel):
    now: str | None = None


def _require_agent(agent_id: str | None) -> str:
    if not agent_id:
        raise PcpError("malformed", "X-Agent-Id header is required for commands")
    return agent_id


class _IdempotencyCache:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._cache: dict[tuple[str, str], tuple[int, Any]] = {}

    def get(self, path: str, key: str | None) -> tuple[int, Any] | None:
        if key is None:
            return None
        with self._lock:
            return self._cache.get((path, key))

    def put(self, path: str, key: str | None, status: int, body: Any) -> None:
        if key is None:
            return
        with self._lock:
            self._cache[(path, key)] = (status, body)


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="policy cycle provenance service")
    # The operator console runs on a different origin; identity is an
    # asserted header anyway, so the API is open to browsers.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["X-Agent-Id", "Idempotency-Key", "Content-Type"],
    )
    app.state.runtime = runtime
    engine = runtime.engine
    connector = runtime.connector
    store = runtime.store
    idempotency = _IdempotencyCache()

    @app.exception_handler(PcpError)
    async def _pcp_error(request: Request, exc: PcpError) -> JSONResponse:
        return JSONResponse(status_code=http_status(exc.code), content=exc.to_dict())

    def _guarded(path: str, key: str | None, status: int, body: dict) -> JSONResponse:
        idempotency.put(path, key, status, body)
        return JSONResponse(status_code=status, content=body)

    def _replay(path: str, key: str | None) -> JSONResponse | None:
        hit = idempotency.get(path, key)
        if hit is None:
            return None
        return JSONResponse(status_code=hit[0], content=hit[1])

    def _seqs(instance_id: str, before: int) -> list[int]:
        return [e.seq for e in engine.events(instance_id) if e.seq > before]

    def _last_seq(instance_id: str) -> int:
        events = engine.events(instance_id)
        return events[-1].seq if events else 0

    # -- instances ---------------------------------------------------------

    @app.post("/instances")
    def create_instance(
        body: CreateInstanceBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = "/instances"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        agent = _require_agent(x_agent_id)
        instance = engine.create_instance(body.model_version, agent)
        payload = {
            "instance_id": instance.id,
            "seqs": _seqs(instance.id, 0),
            "instance": instance.snapshot(),
        }
        return _guarded(path, idempotency_key, 201, payload)

    @app.get("/instances")
    def list_instances():
        return {"instances": engine.instance_ids()}

    @app.get("/instances/{instance_id}")
    def get_instance(instance_id: str):
        instance = engine.instance(instance_id)
        return {
            "instance": instance.snapshot(),
            "ready_tasks": sorted(engine.ready_tasks(instance_id)),
        }

    @app.get("/instances/{instance_id}/tasks/ready")
    def ready_tasks(instance_id: str):
        return {"ready_tasks": sorted(engine.ready_tasks(instance_id))}

    @app.post("/instances/{instance_id}/tasks/{task_id}/start")
    def start_task(
        instance_id: str,
        task_id: str,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/instances/{instance_id}/tasks/{task_id}/start"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        agent = _require_agent(x_agent_id)
        before = _last_seq(instance_id)
        execution = engine.start_task(instance_id, task_id, agent)
        body = {
            "exec_id": execution.exec_id,
            "seqs": _seqs(instance_id, before),
            "execution": execution.to_dict(),
        }
        return _guarded(path, idempotency_key, 200, body)

    def _resolve_exec(instance_id: str, task_id: str, exec_id: str | None) -> str:
        if exec_id is not None:
            return exec_id
        instance = engine.instance(instance_id)
        pe = instance.active_phase_execution()
        if pe is not None:
            for te in instance.iteration_executions(pe.phase_id, pe.iteration):
                if te.task_id == task_id and te.state in (
                    TaskState.IN_PROGRESS,
                    TaskState.AWAITING_EXTERNAL,
                ):
                    return te.exec_id
        raise PcpError(
            "unknown-execution",
            f"no open execution of task {task_id!r} in the active iteration",
        )

    @app.post("/instances/{instance_id}/tasks/{task_id}/complete")
    def complete_task(
        instance_id: str,
        task_id: str,
        body: CompleteBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/instances/{instance_id}/tasks/{task_id}/complete"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        agent = _require_agent(x_agent_id)
        exec_id = _resolve_exec(instance_id, task_id, body.exec_id)
        before = _last_seq(instance_id)
        engine.complete_task(instance_id, exec_id, body.outputs, agent, body.comment)
        return _guarded(
            path,
            idempotency_key,
            200,
            {"exec_id": exec_id, "seqs": _seqs(instance_id, before)},
        )

    @app.post("/instances/{instance_id}/tasks/{task_id}/skip")
    def skip_task(
        instance_id: str,
        task_id: str,
        body: SkipBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/instances/{instance_id}/tasks/{task_id}/skip"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        agent = _require_agent(x_agent_id)
        before = _last_seq(instance_id)
        decision = engine.skip_task(instance_id, task_id, agent, body.reason)
        return _guarded(
            path,
            idempotency_key,
            200,
            {"decision": decision.to_dict(), "seqs": _seqs(instance_id, before)},
        )

    @app.post("/instances/{instance_id}/transition")
    def transition(
        instance_id: str,
        body: TransitionBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/instances/{instance_id}/transition"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        _require_agent(x_agent_id)
        before = _last_seq(instance_id)
        decision = engine.request_phase_transition(instance_id, body.target_phase)
        payload = {
            "decision": decision.to_dict() if decision is not None else None,
            "instance_completed": decision is None,
            "seqs": _seqs(instance_id, before),
        }
        return _guarded(path, idempotency_key, 200, payload)

    @app.post("/instances/{instance_id}/loopback")
    def loopback(
        instance_id: str,
        body: LoopbackBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/instances/{instance_id}/loopback"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        agent = _require_agent(x_agent_id)
        before = _last_seq(instance_id)
        decision = engine.loop_back(instance_id, body.target_phase, agent, body.reason)
        return _guarded(
            path,
            idempotency_key,
            200,
            {"decision": decision.to_dict(), "seqs": _seqs(instance_id, before)},
        )

    @app.get("/instances/{instance_id}/decisions/pending")
    def pending_decisions(instance_id: str):
        instance = engine.instance(instance_id)
        return {"decisions": [d.to_dict() for d in instance.pending_decisions()]}

    @app.post("/decisions/{decision_id}/resolve")
    def resolve_decision(
        decision_id: str,
        body: ResolveBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/decisions/{decision_id}/resolve"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        agent = _require_agent(x_agent_id)
        decision = engine.find_decision(decision_id)
        before = _last_seq(decision.instance_id)
        engine.resolve_decision(decision.instance_id, decision_id, body.choice, agent)
        return _guarded(
            path,
            idempotency_key,
            200,
            {
                "decision": engine.instance(decision.instance_id)
                .decisions[decision_id]
                .to_dict(),
                "seqs": _seqs(decision.instance_id, before),
            },
        )

    # -- tokens ------------------------------------------------------------

    @app.post("/instances/{instance_id}/tasks/{task_id}/dispatch")
    def dispatch(
        instance_id: str,
        task_id: str,
        body: DispatchBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/instances/{instance_id}/tasks/{task_id}/dispatch"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        _require_agent(x_agent_id)
        exec_id = _resolve_exec(instance_id, task_id, None)
        deadline = body.deadline
        if deadline is None:
            offset = body.deadline_s if body.deadline_s is not None else 3600.0
            deadline = (
                parse_ts(engine.clock.now()) + timedelta(seconds=offset)
            ).isoformat(timespec="microseconds")
        before = _last_seq(instance_id)
        token = connector.dispatch_token(
            instance_id, exec_id, body.destination, body.text, body.expected_kind, deadline
        )
        return _guarded(
            path,
            idempotency_key,
            200,
            {"token": token.envelope(), "seqs": _seqs(instance_id, before)},
        )

    @app.post("/tokens/{token_id}/response")
    def token_response(
        token_id: str,
        body: TokenResponseBody,
        x_agent_id: str | None = Header(default=None),
        idempotency_key: str | None = Header(default=None),
    ):
        path = f"/tokens/{token_id}/response"
        replayed = _replay(path, idempotency_key)
        if replayed is not None:
            return replayed
        responder = body.responder or _require_agent(x_agent_id)
        instance = connector.receive_response(token_id, body.payload, responder)
        return _guarded(
            path,
            idempotency_key,
            200,
            {"token": instance.tokens[token_id].to_dict()},
        )

    @app.post("/tokens/expire")
    def expire_tokens(
        body: ExpireBody, x_agent_id: str | None = Header(default=None)
    ):
        decisions = connector.expire_tokens(body.now)
        return {"decisions": [d.to_dict() for d in decisions]}

    @app.get("/tokens/outstanding")
    def outstanding_tokens(instance: str | None = Query(default=None)):
        return {"tokens": [t.to_dict() for t in connector.outstanding(instance)]}

    # -- stakeholders ------------------------------------------------------

    @app.post("/stakeholders")
    def add_stakeholder(
        body: StakeholderBody, x_agent_id: str | None = Header(default=None)
    ):
        _require_agent(x_agent_id)
        try:
            kind = StakeholderKind(body.kind)
        except ValueError:
            raise PcpError(
                "malformed",
                f"kind must be one of {[k.value for k in StakeholderKind]}",
            ) from None
        addr = runtime.register_stakeholder(
            StakeholderAddress(body.id, body.name, body.department, body.endpoint, kind)
        )
        return JSONResponse(status_code=201, content={"stakeholder": addr.to_dict()})

    @app.get("/stakeholders")
    def list_stakeholders():
        return {"stakeholders": [s.to_dict() for s in connector.stakeholders()]}

    # -- event feed ---------------------------------------------------------

    @app.get("/instances/{instance_id}/events")
    def event_feed(instance_id: str, from_seq: int = Query(default=1, alias="from", ge=1)):
        events = engine.events(instance_id, from_seq)
        next_cursor = events[-1].seq + 1 if events else from_seq
        return {"events": [e.to_dict() for e in events], "next": next_cursor}

    # -- provenance ---------------------------------------------------------

    @app.get("/prov/instances/{instance_id}/trail")
    def prov_trail(instance_id: str):
        return {"trail": store.audit_trail(instance_id)}

    @app.get("/prov/entities/{entity_id}/lineage")
    def prov_lineage(entity_id: str):
        return store.lineage(entity_id).canonical_dict()

    @app.get("/prov/instances/{instance_id}/export")
    def prov_export(instance_id: str):
        document = store.export_instance(instance_id)
        return Response(
            content=canonical_json(document.to_dict()), media_type="application/json"
        )

    @app.post("/prov/import")
    def prov_import(document: dict):
        graph = import_prov(document)
        return {
            "entities": len(graph.entities),
            "activities": len(graph.activities),
            "agents": len(graph.agents),
            "edges": len(graph.edges),
        }

    @app.get("/prov/query")
    def prov_query(
        agent: str | None = None,
        phase: str | None = None,
        activity_type: str | None = None,
        time_from: str | None = None,
        time_to: str | None = None,
    ):
        return {
            "activities": store.query(
                agent=agent,
                phase=phase,
                activity_type=activity_type,
                time_from=time_from,
                time_to=time_to,
            )
        }

    # -- meta-models ---------------------------------------------------------

    @app.get("/metamodels")
    def list_models():
        return {"versions": runtime.registry.versions()}

    @app.get("/metamodels/{version}")
    def get_model(version: str):
        return serialize_meta_meta_model(runtime.registry.get(version))

    @app.post("/metamodels")
    def register_model(document: dict, x_agent_id: str | None = Header(default=None)):
        _require_agent(x_agent_id)
        parsed = parse_meta_meta_model(document)
        if isinstance(parsed, ValidationReport):
            raise PcpError(
                "invalid-model",
                "document failed validation",
                violations=[str(v) for v in parsed.violations],
            )
        version = runtime.register_model(parsed)
        return JSONResponse(status_code=201, content={"version": version})

    return app
