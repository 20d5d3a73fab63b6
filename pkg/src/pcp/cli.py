"""pcp command line: meta-model tooling, the service, and provenance queries.

Most commands work against either a running server (--server URL) or local
state on disk (--state-dir DIR, the same directory `pcp serve --log-dir`
writes). Local mode rebuilds the engine and provenance graph from the
append-only logs before acting, so reads are exact and writes replay-safe.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import httpx

from .events import canonical_json
from .model import (
    MetaMetaModel,
    ValidationReport,
    default_policy_cycle_document,
    parse_meta_meta_model,
    serialize_meta_meta_model,
)
from .errors import PcpError
from .routing import StakeholderAddress, StakeholderKind
from .runtime import Runtime


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _client(server: str) -> httpx.Client:
    return httpx.Client(base_url=server, timeout=30.0)


def _check(response: httpx.Response) -> dict:
    if response.status_code >= 400:
        try:
            body = response.json()
        except ValueError:
            body = {"message": response.text}
        _fail(f"{response.status_code} {body.get('error', '')}: {body.get('message', '')}")
    return response.json()


server_option = click.option("--server", default=None, help="base URL of a running pcp server")
state_option = click.option(
    "--state-dir", default=None, type=click.Path(), help="local state directory"
)
agent_option = click.option("--agent", default="cli", help="acting agent id", show_default=True)


def _local_runtime(state_dir: str | None) -> Runtime:
    return Runtime(state_dir=state_dir)


@click.group()
def main() -> None:
    """Track multi-phase policy work and its full provenance."""


# -- model ------------------------------------------------------------------


@main.group()
def model() -> None:
    """Validate, register, and emit meta-model documents."""


@model.command("validate")
@click.argument("file", type=click.Path(exists=True))
def model_validate(file: str) -> None:
    parsed = parse_meta_meta_model(Path(file).read_text(encoding="utf-8"))
    if isinstance(parsed, ValidationReport):
        click.echo(str(parsed))
        sys.exit(1)
    click.echo(f"valid: version {parsed.version}, {len(parsed.phases)} phases")


@model.command("register")
@click.argument("file", type=click.Path(exists=True))
@server_option
@state_option
@agent_option
def model_register(file: str, server: str | None, state_dir: str | None, agent: str) -> None:
    text = Path(file).read_text(encoding="utf-8")
    if server:
        with _client(server) as client:
            body = _check(
                client.post(
                    "/metamodels", json=json.loads(text), headers={"X-Agent-Id": agent}
                )
            )
        click.echo(body["version"])
        return
    parsed = parse_meta_meta_model(text)
    if isinstance(parsed, ValidationReport):
        click.echo(str(parsed))
        sys.exit(1)
    runtime = _local_runtime(state_dir)
    try:
        click.echo(runtime.register_model(parsed))
    except PcpError as err:
        _fail(err.message)
    finally:
        runtime.close()


@model.command("default")
def model_default() -> None:
    click.echo(json.dumps(default_policy_cycle_document(), indent=2))


# -- serve ------------------------------------------------------------------


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.option(
    "--log-dir",
    default=None,
    type=click.Path(),
    help="state directory for event and provenance logs (omit for in-memory)",
)
def serve(host: str, port: int, log_dir: str | None) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    app = create_app(Runtime(state_dir=log_dir))
    uvicorn.run(app, host=host, port=port, log_level="warning")


# -- stakeholders -------------------------------------------------------------


@main.group()
def stakeholder() -> None:
    """Manage the external connector's address book."""


@stakeholder.command("register")
@click.option("--id", "stakeholder_id", required=True)
@click.option("--name", default=None)
@click.option("--department", default="")
@click.option("--endpoint", required=True)
@click.option(
    "--kind",
    default="Department",
    type=click.Choice([k.value for k in StakeholderKind]),
    show_default=True,
)
@server_option
@state_option
@agent_option
def stakeholder_register(
    stakeholder_id: str,
    name: str | None,
    department: str,
    endpoint: str,
    kind: str,
    server: str | None,
    state_dir: str | None,
    agent: str,
) -> None:
    record = {
        "id": stakeholder_id,
        "name": name or stakeholder_id,
        "department": department,
        "endpoint": endpoint,
        "kind": kind,
    }
    if server:
        with _client(server) as client:
            body = _check(
                client.post("/stakeholders", json=record, headers={"X-Agent-Id": agent})
            )
        click.echo(body["stakeholder"]["id"])
        return
    runtime = _local_runtime(state_dir)
    try:
        addr = runtime.register_stakeholder(StakeholderAddress.from_dict(record))
        click.echo(addr.id)
    except PcpError as err:
        _fail(err.message)
    finally:
        runtime.close()


# -- tokens -------------------------------------------------------------------


@main.group()
def token() -> None:
    """Answer or expire outstanding stakeholder tokens."""


@token.command("respond")
@click.argument("token_id")
@click.option("--file", "payload_file", required=True, type=click.Path(exists=True))
@click.option("--responder", default=None, help="responding agent (defaults to --agent)")
@server_option
@state_option
@agent_option
def token_respond(
    token_id: str,
    payload_file: str,
    responder: str | None,
    server: str | None,
    state_dir: str | None,
    agent: str,
) -> None:
    payload = json.loads(Path(payload_file).read_text(encoding="utf-8"))
    responder = responder or agent
    if server:
        with _client(server) as client:
            body = _check(
                client.post(
                    f"/tokens/{token_id}/response",
                    json={"payload": payload, "responder": responder},
                    headers={"X-Agent-Id": agent},
                )
            )
        click.echo(body["token"]["state"])
        return
    runtime = _local_runtime(state_dir)
    try:
        instance = runtime.connector.receive_response(token_id, payload, responder)
        click.echo(instance.tokens[token_id].state.value)
    except PcpError as err:
        _fail(err.message)
    finally:
        runtime.close()


# -- provenance ----------------------------------------------------------------


@main.group()
def prov() -> None:
    """Query the recorded provenance."""


@prov.command("trail")
@click.argument("instance_id")
@server_option
@state_option
def prov_trail(instance_id: str, server: str | None, state_dir: str | None) -> None:
    if server:
        with _client(server) as client:
            body = _check(client.get(f"/prov/instances/{instance_id}/trail"))
        click.echo(json.dumps(body["trail"], indent=2))
        return
    runtime = _local_runtime(state_dir)
    try:
        click.echo(json.dumps(runtime.store.audit_trail(instance_id), indent=2))
    finally:
        runtime.close()


@prov.command("lineage")
@click.argument("entity_id")
@server_option
@state_option
def prov_lineage(entity_id: str, server: str | None, state_dir: str | None) -> None:
    if server:
        with _client(server) as client:
            body = _check(client.get(f"/prov/entities/{entity_id}/lineage"))
        click.echo(json.dumps(body, indent=2))
        return
    runtime = _local_runtime(state_dir)
    try:
        click.echo(json.dumps(runtime.store.lineage(entity_id).canonical_dict(), indent=2))
    except PcpError as err:
        _fail(err.message)
    finally:
        runtime.close()


@prov.command("export")
@click.argument("instance_id")
@server_option
@state_option
def prov_export(instance_id: str, server: str | None, state_dir: str | None) -> None:
    if server:
        with _client(server) as client:
            response = client.get(f"/prov/instances/{instance_id}/export")
            if response.status_code >= 400:
                _check(response)
            click.echo(response.text)
        return
    runtime = _local_runtime(state_dir)
    try:
        document = runtime.store.export_instance(instance_id)
        click.echo(canonical_json(document.to_dict()))
    finally:
        runtime.close()


@prov.command("query")
@click.option("--agent", "agent_filter", default=None)
@click.option("--phase", default=None)
@click.option("--type", "activity_type", default=None)
@click.option("--from", "time_from", default=None)
@click.option("--to", "time_to", default=None)
@server_option
@state_option
def prov_query(
    agent_filter: str | None,
    phase: str | None,
    activity_type: str | None,
    time_from: str | None,
    time_to: str | None,
    server: str | None,
    state_dir: str | None,
) -> None:
    if server:
        params = {
            k: v
            for k, v in {
                "agent": agent_filter,
                "phase": phase,
                "activity_type": activity_type,
                "time_from": time_from,
                "time_to": time_to,
            }.items()
            if v is not None
        }
        with _client(server) as client:
            body = _check(client.get("/prov/query", params=params))
        click.echo(json.dumps(body["activities"], indent=2))
        return
    runtime = _local_runtime(state_dir)
    try:
        results = runtime.store.query(
            agent=agent_filter,
            phase=phase,
            activity_type=activity_type,
            time_from=time_from,
            time_to=time_to,
        )
        click.echo(json.dumps(results, indent=2))
    finally:
        runtime.close()


if __name__ == "__main__":
    main()
