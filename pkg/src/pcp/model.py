"""Meta-model layer: declarative, versioned descriptions of the policy cycle.

A MetaMetaModel describes the whole cycle: one PhaseMetaModel per phase, each
holding TaskDefs with intra-phase precedence, plus inter-phase ordering
constraints. The document format is JSON and self-descriptive: every document
embeds a JSON Schema (under "schema") that the document itself must satisfy.

Parsing is total: any input yields either a fully validated model or a
ValidationReport listing every violation found, never an exception for
content problems.
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import dataclass, field
from typing import Any

import jsonschema

from .errors import PcpError

DEFAULT_VERSION = "1.0.0"


@dataclass(frozen=True)
class TaskDef:
    """One schedulable unit inside a phase.

    subtasks are unordered checklist labels, not schedulable units.
    precedence names tasks of the same phase that must be Completed or
    Skipped (in the current iteration) before this task may start.
    """

    id: str
    name: str
    subtasks: tuple[str, ...] = ()
    mandatory: bool = False
    precedence: frozenset[str] = frozenset()
    external_consult_allowed: bool = True


@dataclass(frozen=True)
class PhaseMetaModel:
    id: str
    name: str
    ordinal: int
    tasks: tuple[TaskDef, ...]
    entry_decision_required: bool = True

    def task(self, task_id: str) -> TaskDef | None:
        for task in self.tasks:
            if task.id == task_id:
                return task
        return None

    def entry_task_ids(self) -> list[str]:
        """Tasks with empty precedence, in declaration order."""
        return [t.id for t in self.tasks if not t.precedence]


@dataclass(frozen=True)
class PhaseOrderConstraint:
    """subject_phase may not begin its first (non-loop-back) iteration until
    requires_phase has at least one completed iteration."""

    subject_phase: str
    requires_phase: str


@dataclass(frozen=True)
class MetaMetaModel:
    version: str
    phases: tuple[PhaseMetaModel, ...]
    phase_constraints: tuple[PhaseOrderConstraint, ...]
    schema_descriptor: dict[str, Any] = field(hash=False, default_factory=dict)

    def phase(self, phase_id: str) -> PhaseMetaModel | None:
        for phase in self.phases:
            if phase.id == phase_id:
                return phase
        return None

    def phases_by_ordinal(self) -> list[PhaseMetaModel]:
        return sorted(self.phases, key=lambda p: p.ordinal)

    def first_phase(self) -> PhaseMetaModel:
        return self.phases_by_ordinal()[0]

    def task_ids(self) -> set[str]:
        return {t.id for p in self.phases for t in p.tasks}

    def phase_ids(self) -> set[str]:
        return {p.id for p in self.phases}

    def find_task(self, task_id: str) -> tuple[PhaseMetaModel, TaskDef] | None:
        for phase in self.phases:
            task = phase.task(task_id)
            if task is not None:
                return phase, task
        return None


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    path: str = ""

    def __str__(self) -> str:
        where = f" at {self.path}" if self.path else ""
        return f"[{self.code}] {self.message}{where}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str, path: str = "") -> None:
        self.violations.append(Violation(code, message, path))

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(str(v) for v in self.violations)


def _find_cycle(nodes: list[str], edges: dict[str, set[str]]) -> list[str] | None:
    """Depth-first cycle detection; returns one cycle's members if any."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    stack_path: list[str] = []

    def visit(node: str) -> list[str] | None:
        color[node] = GREY
        stack_path.append(node)
        for nxt in sorted(edges.get(node, ())):
            if nxt not in color:
                continue
            if color[nxt] == GREY:
                return stack_path[stack_path.index(nxt):]
            if color[nxt] == WHITE:
                found = visit(nxt)
                if found:
                    return found
        stack_path.pop()
        color[node] = BLACK
        return None

    for node in nodes:
        if color[node] == WHITE:
            found = visit(node)
            if found:
                return found
    return None


def validate_phase_meta_model(phase: PhaseMetaModel, path: str = "") -> ValidationReport:
    """Check one phase's invariants; the report is the result, never raises."""
    report = ValidationReport()
    prefix = path or f"phases[{phase.id}]"
    if not phase.id:
        report.add("empty-id", "phase id must be non-empty", prefix)
    if not phase.tasks:
        report.add("empty-phase", f"phase {phase.id!r} has no tasks", prefix)
        return report

    seen: set[str] = set()
    task_ids = {t.id for t in phase.tasks}
    for i, task in enumerate(phase.tasks):
        tpath = f"{prefix}.tasks[{i}]"
        if not task.id:
            report.add("empty-id", "task id must be non-empty", tpath)
        if task.id in seen:
            report.add("duplicate-id", f"duplicate task id {task.id!r}", tpath)
        seen.add(task.id)
        for ref in sorted(task.precedence):
            if ref not in task_ids:
                report.add(
                    "dangling-precedence",
                    f"task {task.id!r} requires unknown task {ref!r}",
                    tpath,
                )

    cycle = _find_cycle(
        sorted(task_ids), {t.id: set(t.precedence) & task_ids for t in phase.tasks}
    )
    if cycle:
        report.add(
            "precedence-cycle",
            f"precedence cycle among {{{', '.join(sorted(cycle))}}}",
            prefix,
        )
    elif not any(not t.precedence for t in phase.tasks):
        report.add(
            "no-entry-point",
            f"phase {phase.id!r} has no task with empty precedence",
            prefix,
        )
    return report


def validate_meta_meta_model(model: MetaMetaModel) -> ValidationReport:
    report = ValidationReport()
    if not model.phases:
        report.add("empty-phases", "model declares zero phases")
        return report

    seen_ids: set[str] = set()
    seen_ordinals: set[int] = set()
    for i, phase in enumerate(model.phases):
        if phase.id in seen_ids:
            report.add("duplicate-id", f"duplicate phase id {phase.id!r}", f"phases[{i}]")
        seen_ids.add(phase.id)
        if phase.ordinal in seen_ordinals:
            report.add(
                "duplicate-ordinal",
                f"ordinal {phase.ordinal} used by more than one phase",
                f"phases[{i}]",
            )
        seen_ordinals.add(phase.ordinal)
        report.violations.extend(validate_phase_meta_model(phase).violations)

    phase_ids = model.phase_ids()
    constraint_edges: dict[str, set[str]] = {p: set() for p in phase_ids}
    for i, constraint in enumerate(model.phase_constraints):
        cpath = f"phase_constraints[{i}]"
        if constraint.subject_phase == constraint.requires_phase:
            report.add(
                "self-constraint",
                f"phase {constraint.subject_phase!r} cannot require itself",
                cpath,
            )
            continue
        dangling = False
        for ref in (constraint.subject_phase, constraint.requires_phase):
            if ref not in phase_ids:
                report.add(
                    "dangling-phase-constraint", f"unknown phase {ref!r}", cpath
                )
                dangling = True
        if not dangling:
            constraint_edges[constraint.subject_phase].add(constraint.requires_phase)
    cycle = _find_cycle(sorted(phase_ids), constraint_edges)
    if cycle:
        report.add(
            "phase-constraint-cycle",
            f"phase constraints form a cycle among {{{', '.join(sorted(cycle))}}}",
        )
    return report


def serialize_meta_meta_model(model: MetaMetaModel) -> dict[str, Any]:
    """Canonical document form; parse(serialize(m)) is structurally equal to m."""
    return {
        "version": model.version,
        "phases": [
            {
                "id": p.id,
                "name": p.name,
                "ordinal": p.ordinal,
                "entry_decision_required": p.entry_decision_required,
                "tasks": [
                    {
                        "id": t.id,
                        "name": t.name,
                        "subtasks": list(t.subtasks),
                        "mandatory": t.mandatory,
                        "precedence": sorted(t.precedence),
                        "external_consult_allowed": t.external_consult_allowed,
                    }
                    for t in p.tasks
                ],
            }
            for p in model.phases
        ],
        "phase_constraints": [
            {"subject": c.subject_phase, "requires": c.requires_phase}
            for c in model.phase_constraints
        ],
        "schema": copy.deepcopy(model.schema_descriptor),
    }


def _build_model(doc: dict[str, Any]) -> MetaMetaModel:
    phases = []
    for p in doc.get("phases", []):
        tasks = tuple(
            TaskDef(
                id=str(t.get("id", "")),
                name=str(t.get("name", t.get("id", ""))),
                subtasks=tuple(t.get("subtasks", [])),
                mandatory=bool(t.get("mandatory", False)),
                precedence=frozenset(t.get("precedence", [])),
                external_consult_allowed=bool(t.get("external_consult_allowed", True)),
            )
            for t in p.get("tasks", [])
        )
        phases.append(
            PhaseMetaModel(
                id=str(p.get("id", "")),
                name=str(p.get("name", p.get("id", ""))),
                ordinal=int(p.get("ordinal", 0)),
                tasks=tasks,
                entry_decision_required=bool(p.get("entry_decision_required", True)),
            )
        )
    constraints = tuple(
        PhaseOrderConstraint(str(c.get("subject", "")), str(c.get("requires", "")))
        for c in doc.get("phase_constraints", [])
    )
    return MetaMetaModel(
        version=str(doc.get("version", "")),
        phases=tuple(phases),
        phase_constraints=constraints,
        schema_descriptor=copy.deepcopy(doc.get("schema", {})),
    )


def parse_meta_meta_model(document: str | dict[str, Any]) -> MetaMetaModel | ValidationReport:
    """Parse and fully validate a meta-model document.

    Returns the model when every invariant holds, otherwise a report that
    lists all violations found (syntax, schema, and semantic), no fail-fast.
    """
    report = ValidationReport()
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            report.add(
                "syntax-error",
                f"{exc.msg} (line {exc.lineno}, column {exc.colno})",
            )
            return report
    else:
        doc = document

    if not isinstance(doc, dict):
        report.add("schema-violation", "document root must be a JSON object")
        return report

    schema = doc.get("schema")
    if not isinstance(schema, dict) or not schema:
        report.add("schema-violation", "document must embed its own schema under 'schema'")
    else:
        try:
            validator_cls = jsonschema.validators.validator_for(schema)
            validator_cls.check_schema(schema)
            for error in validator_cls(schema).iter_errors(doc):
                report.add(
                    "schema-violation",
                    error.message,
                    "/".join(str(p) for p in error.absolute_path),
                )
        except jsonschema.SchemaError as exc:
            report.add("schema-violation", f"embedded schema is itself invalid: {exc.message}")

    if not isinstance(doc.get("version"), str) or not doc.get("version"):
        report.add("schema-violation", "version must be a non-empty string", "version")
    if not isinstance(doc.get("phases"), list):
        report.add("schema-violation", "phases must be a list", "phases")
        return report

    model = _build_model(doc)
    report.violations.extend(validate_meta_meta_model(model).violations)
    if report.ok:
        return model
    return report


def default_policy_cycle() -> MetaMetaModel:
    """The built-in five-phase cycle with its general task catalogue.

    Intra-phase precedence encodes only the stated ordering rules (validation
    and plan setting follow problem identification; solution determination
    follows identifying challenges and opportunities); everything else is
    deliberately unordered. One inter-phase rule ships by default:
    implementation requires a completed agenda-setting iteration.
    """
    model = parse_meta_meta_model(default_policy_cycle_document())
    assert isinstance(model, MetaMetaModel), f"built-in cycle failed validation: {model}"
    return model


def default_policy_cycle_document() -> dict[str, Any]:
    return {
        "version": DEFAULT_VERSION,
        "phases": [
            {
                "id": "agenda_setting",
                "name": "Agenda Setting",
                "ordinal": 1,
                "entry_decision_required": True,
                "tasks": [
                    {
                        "id": "problem_identification",
                        "name": "Problem Identification",
                        "subtasks": [
                            "acquisition of qualitative and/or quantitative data",
                            "review of collected data/reported issue",
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "validation",
                        "name": "Validation",
                        "subtasks": [
                            "evidence gathering for objective or subjective validation",
                            "analysis of gathered evidence",
                        ],
                        "mandatory": False,
                        "precedence": ["problem_identification"],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "plan_setting",
                        "name": "Plan setting",
                        "subtasks": [
                            "Identify action to be taken (change of existing policy or devise new policy)",
                            "devise strategy",
                        ],
                        "mandatory": False,
                        "precedence": ["problem_identification"],
                        "external_consult_allowed": True,
                    },
                ],
            },
            {
                "id": "analysis",
                "name": "Analysis",
                "ordinal": 2,
                "entry_decision_required": True,
                "tasks": [
                    {
                        "id": "challenges_opportunities_identification",
                        "name": "Challenges and opportunities identification",
                        "subtasks": [
                            "specification of goals",
                            "data collection from diverse sources",
                            "collection of opinions from stakeholders",
                            "analysis of collected data",
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "solution_determination",
                        "name": "Determination of solution approaches and strategies",
                        "subtasks": [
                            "develop a range of options",
                            "analysis of options",
                        ],
                        "mandatory": False,
                        "precedence": ["challenges_opportunities_identification"],
                        "external_consult_allowed": True,
                    },
                ],
            },
            {
                "id": "policy_creation",
                "name": "Policy Creation",
                "ordinal": 3,
                "entry_decision_required": True,
                "tasks": [
                    {
                        "id": "formal_consultation",
                        "name": "Formal Consultation",
                        "subtasks": [
                            "collection of residents' opinions",
                            "stakeholders' engagement",
                            "assessment of opinions",
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "final_decision_approval",
                        "name": "Final Decision and approval",
                        "subtasks": [
                            "weighing of policy options in the political context",
                            "decision based on step 'a'",
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "policy_formulation",
                        "name": "Policy Formulation",
                        "subtasks": ["draft policy based on policy options"],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "impl_monitoring_plan_design",
                        "name": "Design implementation and monitoring plan",
                        "subtasks": [
                            "Actions to be taken for implementation and monitoring"
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                ],
            },
            {
                "id": "implementation",
                "name": "Implementation",
                "ordinal": 4,
                "entry_decision_required": True,
                "tasks": [
                    {
                        "id": "interagency_collaboration",
                        "name": "Interagency collaboration",
                        "subtasks": [
                            "collection of data",
                            "selection of relevant implementation body",
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "regulation_development",
                        "name": "Development of regulation/legislation",
                        "subtasks": [],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "monitoring_data_collection",
                        "name": "Collection of monitoring data",
                        "subtasks": ["identify key indicators of monitoring"],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                ],
            },
            {
                "id": "monitoring_evaluation",
                "name": "Monitoring & Evaluation",
                "ordinal": 5,
                "entry_decision_required": True,
                "tasks": [
                    {
                        "id": "monitoring",
                        "name": "Monitoring",
                        "subtasks": [
                            "collect evidence",
                            "analyse data collected as per specified indicators",
                            "collect views/feedback of users including citizens",
                            "analyse collected views",
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "evaluation",
                        "name": "Evaluation",
                        "subtasks": [
                            "Administrative and judicial evaluation",
                            "Impact evaluation",
                        ],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": True,
                    },
                    {
                        "id": "loop_back",
                        "name": "Loop back to stage one",
                        "subtasks": [],
                        "mandatory": False,
                        "precedence": [],
                        "external_consult_allowed": False,
                    },
                ],
            },
        ],
        "phase_constraints": [
            {"subject": "implementation", "requires": "agenda_setting"}
        ],
        "schema": document_schema(),
    }


def document_schema() -> dict[str, Any]:
    """JSON Schema for the meta-model document format (including itself)."""
    identifier = {"type": "string", "minLength": 1, "pattern": "^[A-Za-z_][A-Za-z0-9_\\-]*$"}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "Policy cycle meta-model document",
        "type": "object",
        "required": ["version", "phases", "phase_constraints", "schema"],
        "additionalProperties": False,
        "properties": {
            "version": {"type": "string", "pattern": "^\\d+\\.\\d+\\.\\d+$"},
            "phases": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["id", "name", "ordinal", "tasks"],
                    "additionalProperties": False,
                    "properties": {
                        "id": identifier,
                        "name": {"type": "string"},
                        "ordinal": {"type": "integer"},
                        "entry_decision_required": {"type": "boolean"},
                        "tasks": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["id", "name"],
                                "additionalProperties": False,
                                "properties": {
                                    "id": identifier,
                                    "name": {"type": "string"},
                                    "subtasks": {
                                        "type": "array",
                                        "items": {"type": "string"},
                                    },
                                    "mandatory": {"type": "boolean"},
                                    "precedence": {
                                        "type": "array",
                                        "items": identifier,
                                    },
                                    "external_consult_allowed": {"type": "boolean"},
                                },
                            },
                        },
                    },
                },
            },
            "phase_constraints": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["subject", "requires"],
                    "additionalProperties": False,
                    "properties": {"subject": identifier, "requires": identifier},
                },
            },
            "schema": {"type": "object"},
        },
    }


class MetaModelRegistry:
    """Versioned, immutable store of validated meta-models.

    Concurrent reads are safe; writes are serialized. Once registered a
    version never changes, so in-flight instances stay pinned to the model
    they were created under.
    """

    def __init__(self) -> None:
        self._models: dict[str, MetaMetaModel] = {}
        self._lock = threading.RLock()

    def register(self, model: MetaMetaModel) -> str:
        report = validate_meta_meta_model(model)
        if not report.ok:
            raise PcpError("invalid-model", f"model failed validation: {report}")
        with self._lock:
            if model.version in self._models:
                raise PcpError(
                    "duplicate-version", f"version {model.version!r} already registered"
                )
            self._models[model.version] = model
            return model.version

    def get(self, version: str) -> MetaMetaModel:
        with self._lock:
            try:
                return self._models[version]
            except KeyError:
                raise PcpError("unknown-version", f"no model registered as {version!r}") from None

    def has(self, version: str) -> bool:
        with self._lock:
            return version in self._models

    def versions(self) -> list[str]:
        with self._lock:
            return sorted(self._models)


def register_version(registry: MetaModelRegistry, model: MetaMetaModel) -> str:
    """Validate and immutably store a model; returns its version id."""
    return registry.register(model)
