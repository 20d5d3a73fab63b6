"""Policy cycle provenance: meta-model-driven workflow engine with full
PROV-style provenance capture, token-based stakeholder routing, and an
append-only, replayable record of everything that happened."""

from .conditions import evaluate_condition, parse_condition
from .engine import (
    Connector,
    DecisionKind,
    DecisionPoint,
    Engine,
    EnteredVia,
    InstanceStatus,
    PhaseExecution,
    PhaseState,
    PolicyInstance,
    TaskExecution,
    TaskState,
    Token,
    TokenState,
    apply_event,
    ready_task_ids,
    replay,
)
from .errors import PcpError
from .events import EngineEvent, EventType, LogicalClock, UtcClock, canonical_json
from .model import (
    DEFAULT_VERSION,
    MetaMetaModel,
    MetaModelRegistry,
    PhaseMetaModel,
    PhaseOrderConstraint,
    TaskDef,
    ValidationReport,
    default_policy_cycle,
    default_policy_cycle_document,
    parse_meta_meta_model,
    register_version,
    serialize_meta_meta_model,
    validate_phase_meta_model,
)
from .prov import (
    ActivityType,
    AgentType,
    CapturePipeline,
    EntityKind,
    ProvActivity,
    ProvAgent,
    ProvDocument,
    ProvEntity,
    ProvRelation,
    RelationKind,
    map_event,
)
from .routing import (
    ExternalConnector,
    NetworkSimulation,
    StakeholderAddress,
    StakeholderKind,
    replay_drop_decisions,
)
from .runtime import Runtime
from .store import (
    ProvenanceStore,
    ProvGraph,
    StoreRecord,
    audit_trail,
    export_prov,
    import_prov,
    lineage,
    query,
    rebuild,
)

__version__ = "0.1.0"
