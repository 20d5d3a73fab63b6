"""Composition root: engine + router + capture + recorder, optionally durable.

With a state directory, the runtime persists:

    models/<version>.json   registered meta-model documents
    stakeholders.json       the router's address book
    events.ndjson           every engine event, append-only (source of truth)
    prov.ndjson             every provenance record, append-only (derived)

On startup the event log is replayed through the normal observer chain; the
event appender skips lines already on disk (per-instance high-water mark)
and the provenance store deduplicates on (instance_id, source_seq), so a
crash between the two appends heals itself on the next start.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .engine import Engine, PolicyInstance
from .errors import PcpError
from .events import EngineEvent, UtcClock
from .model import (
    MetaMetaModel,
    MetaModelRegistry,
    ValidationReport,
    default_policy_cycle,
    parse_meta_meta_model,
    serialize_meta_meta_model,
)
from .prov import CapturePipeline
from .routing import ExternalConnector, StakeholderAddress
from .store import ProvenanceStore


class EventLogAppender:
    """Observer that mirrors engine events into an append-only NDJSON file."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self.high_water: dict[str, int] = {}
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")

    def preload(self, events: list[EngineEvent]) -> None:
        for event in events:
            mark = self.high_water.get(event.instance_id, 0)
            self.high_water[event.instance_id] = max(mark, event.seq)

    def __call__(self, event: EngineEvent, instance: PolicyInstance) -> None:
        if event.seq <= self.high_water.get(event.instance_id, 0):
            return
        self._fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
        self._fh.flush()
        self.high_water[event.instance_id] = event.seq

    def close(self) -> None:
        self._fh.close()


class Runtime:
    """Everything the service and CLI need, wired together."""

    def __init__(
        self,
        state_dir: str | Path | None = None,
        clock: Any | None = None,
        register_default: bool = True,
    ) -> None:
        self.clock = clock or UtcClock()
        self.state_dir = Path(state_dir) if state_dir is not None else None
        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)

        self.registry = MetaModelRegistry()
        self.store = ProvenanceStore(
            self.state_dir / "prov.ndjson" if self.state_dir else None, clock=self.clock
        )
        self.engine = Engine(self.registry, clock=self.clock)
        self.connector = ExternalConnector(self.engine)
        self.capture = CapturePipeline(self.store)
        self._appender: EventLogAppender | None = None

        if self.state_dir is not None:
            self._load_models()
        if register_default and not self.registry.has(default_policy_cycle().version):
            self.registry.register(default_policy_cycle())
        if self.state_dir is not None:
            self._load_stakeholders()
            self._appender = EventLogAppender(self.state_dir / "events.ndjson")
            self.engine.observers.append(self._appender)
            self.engine.observers.append(self.capture.on_event)
            self._load_events()
        else:
            self.engine.observers.append(self.capture.on_event)

    # -- persistence -------------------------------------------------------

    def _models_dir(self) -> Path:
        return self.state_dir / "models"

    def _load_models(self) -> None:
        models_dir = self._models_dir()
        if not models_dir.is_dir():
            return
        for path in sorted(models_dir.glob("*.json")):
            parsed = parse_meta_meta_model(path.read_text(encoding="utf-8"))
            if isinstance(parsed, ValidationReport):
                raise PcpError("invalid-model", f"stored model {path.name} is invalid: {parsed}")
            if not self.registry.has(parsed.version):
                self.registry.register(parsed)

    def _load_stakeholders(self) -> None:
        path = self.state_dir / "stakeholders.json"
        if not path.exists():
            return
        for entry in json.loads(path.read_text(encoding="utf-8")):
            self.connector.register_stakeholder(StakeholderAddress.from_dict(entry))

    def _load_events(self) -> None:
        path = self.state_dir / "events.ndjson"
        if not path.exists():
            return
        by_instance: dict[str, list[EngineEvent]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = EngineEvent.from_dict(json.loads(line))
                by_instance.setdefault(event.instance_id, []).append(event)
        for events in by_instance.values():
            events.sort(key=lambda e: e.seq)
            self._appender.preload(events)
            self.engine.load_instance(events)

    def register_model(self, model: MetaMetaModel) -> str:
        version = self.registry.register(model)
        if self.state_dir is not None:
            self._models_dir().mkdir(parents=True, exist_ok=True)
            path = self._models_dir() / f"{version}.json"
            path.write_text(
                json.dumps(serialize_meta_meta_model(model), indent=2, sort_keys=True),
                encoding="utf-8",
            )
        return version

    def register_stakeholder(self, addr: StakeholderAddress) -> StakeholderAddress:
        registered = self.connector.register_stakeholder(addr)
        if self.state_dir is not None:
            path = self.state_dir / "stakeholders.json"
            path.write_text(
                json.dumps(
                    [s.to_dict() for s in self.connector.stakeholders()],
                    indent=2,
                    sort_keys=True,
                ),
                encoding="utf-8",
            )
        return registered

    def close(self) -> None:
        if self._appender is not None:
            self._appender.close()
        self.store.close()
