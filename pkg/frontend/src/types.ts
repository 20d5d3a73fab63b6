/** Wire types, matching the service's JSON exactly (snake_case intact). */

export type EventType =
  | "InstanceCreated"
  | "TaskStarted"
  | "TaskCompleted"
  | "TaskSkipped"
  | "AwaitingExternal"
  | "ExternalReceived"
  | "DecisionRaised"
  | "DecisionResolved"
  | "PhaseEntered"
  | "PhaseCompleted"
  | "LoopBack"
  | "CommandRejected";

export interface EngineEvent {
  seq: number;
  instance_id: string;
  type: EventType;
  payload: Record<string, unknown>;
  at: string;
}

export interface EventBatch {
  events: EngineEvent[];
  next: number;
}

export type DecisionKind =
  | "NextTask"
  | "PhaseEntry"
  | "LoopBackTarget"
  | "TokenExpiry"
  | "SkipApproval";

export interface DecisionDto {
  id: string;
  instance_id: string;
  kind: DecisionKind;
  options: string[];
  context: Record<string, unknown>;
  raised_at: string;
  chosen: string | null;
  decided_by: string | null;
  decided_at: string | null;
}

export interface TokenDto {
  token_id: string;
  instance_id: string;
  task_exec_id: string;
  destination: string;
  requested_details: { text?: string; expected_kind?: string };
  issued_at: string;
  deadline: string;
  state: "Dispatched" | "Responded" | "Expired";
}

export interface InstanceSnapshot {
  id: string;
  model_version: string;
  status: "Active" | "Completed" | "Abandoned";
  created_by: string;
  created_at: string;
  last_seq: number;
  phase_executions: Array<{
    phase_id: string;
    iteration: number;
    state: "Active" | "Completed";
    entered_via: "Initial" | "Transition" | "LoopBack";
    entry_task_id: string | null;
  }>;
  task_executions: Record<
    string,
    {
      exec_id: string;
      task_id: string;
      phase_id: string;
      iteration: number;
      state: string;
      actor: string;
      inputs: string[];
      outputs: string[];
    }
  >;
  connectors: Record<
    string,
    { phase_id: string; last_activity: LastActivity | null; role: string }
  >;
  decisions: Record<string, DecisionDto>;
  tokens: Record<string, TokenDto>;
}

export interface LastActivity {
  exec_id: string;
  task_id: string;
  summary: string;
  at: string;
}

export interface MetaModelDocument {
  version: string;
  phases: Array<{
    id: string;
    name: string;
    ordinal: number;
    tasks: Array<{ id: string; name: string; subtasks: string[]; precedence: string[] }>;
  }>;
}

export interface LineageGraph {
  entities: Record<string, Record<string, unknown>>;
  activities: Record<string, Record<string, unknown>>;
  agents: Record<string, Record<string, unknown>>;
  edges: Array<{
    kind: string;
    source: string;
    target: string;
    role: string | null;
    at: string | null;
  }>;
}

export interface TrailActivity {
  id: string;
  store_seq: number;
  "pcp:type": string;
  "prov:startTime": string;
  "prov:endTime": string | null;
  agents: string[];
  used: string[];
  generated: string[];
  [key: string]: unknown;
}

export interface ApiError {
  error: string;
  message: string;
  detail?: Record<string, unknown>;
}
