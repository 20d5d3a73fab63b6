/** Pure projection of the event feed into the console's view.
 *
 * The view is a deterministic fold over the event prefix: reprojecting from
 * seq 1 always equals the incrementally maintained state, which is what
 * makes a page reload loss-free. Events must arrive contiguously; a gap
 * throws GapError and the caller refetches from seq 1 (never skips).
 */

import type { DecisionDto, EngineEvent, LastActivity, TokenDto } from "./types.js";

export interface TaskView {
  execId: string;
  taskId: string;
  phaseId: string;
  iteration: number;
  state: "InProgress" | "AwaitingExternal" | "Completed" | "Skipped";
  actor: string;
  inputs: string[];
  outputs: string[];
  startedAt: string;
  endedAt: string | null;
}

export interface PhaseView {
  phaseId: string;
  iteration: number;
  state: "Active" | "Completed";
  enteredVia: "Initial" | "Transition" | "LoopBack";
  entryTaskId: string | null;
}

export interface InstanceView {
  instanceId: string;
  modelVersion: string;
  status: "Active" | "Completed" | "Abandoned";
  createdBy: string;
  lastSeq: number;
  phases: PhaseView[];
  tasks: Map<string, TaskView>;
  decisions: Map<string, DecisionDto>;
  tokens: Map<string, TokenDto>;
  connectors: Map<string, LastActivity | null>;
  rejections: Array<{ seq: number; command: string; code: string; message: string }>;
}

export class GapError extends Error {
  constructor(expected: number, got: number) {
    super(`event gap: expected seq ${expected}, got ${got}`);
    this.name = "GapError";
  }
}

function str(payload: Record<string, unknown>, key: string): string {
  return String(payload[key]);
}

function activePhase(view: InstanceView): PhaseView | undefined {
  return view.phases.find((p) => p.state === "Active");
}

function enterPhase(view: InstanceView, event: EngineEvent): void {
  const p = event.payload;
  view.phases.push({
    phaseId: str(p, "phase_id"),
    iteration: Number(p["iteration"]),
    state: "Active",
    enteredVia: p["entered_via"] as PhaseView["enteredVia"],
    entryTaskId: (p["entry_task"] as string | null) ?? null,
  });
  view.connectors.set(str(p, "phase_id"), null);
}

function applyEvent(view: InstanceView, event: EngineEvent): void {
  const p = event.payload;
  switch (event.type) {
    case "InstanceCreated": {
      view.instanceId = str(p, "instance_id");
      view.modelVersion = str(p, "model_version");
      view.createdBy = str(p, "created_by");
      for (const phaseId of p["phase_ids"] as string[]) {
        view.connectors.set(phaseId, null);
      }
      break;
    }
    case "TaskStarted": {
      view.tasks.set(str(p, "exec_id"), {
        execId: str(p, "exec_id"),
        taskId: str(p, "task_id"),
        phaseId: str(p, "phase_id"),
        iteration: Number(p["iteration"]),
        state: "InProgress",
        actor: str(p, "actor"),
        inputs: [],
        outputs: [],
        startedAt: event.at,
        endedAt: null,
      });
      break;
    }
    case "TaskCompleted": {
      const task = view.tasks.get(str(p, "exec_id"));
      if (task) {
        task.state = "Completed";
        task.endedAt = event.at;
        task.outputs = [...(p["outputs"] as string[])];
        task.actor = str(p, "actor");
        view.connectors.set(task.phaseId, {
          exec_id: task.execId,
          task_id: task.taskId,
          summary: str(p, "summary"),
          at: event.at,
        });
      }
      break;
    }
    case "TaskSkipped": {
      const execId = str(p, "exec_id");
      let task = view.tasks.get(execId);
      if (!task) {
        task = {
          execId,
          taskId: str(p, "task_id"),
          phaseId: str(p, "phase_id"),
          iteration: Number(p["iteration"]),
          state: "Skipped",
          actor: str(p, "actor"),
          inputs: [],
          outputs: [],
          startedAt: event.at,
          endedAt: event.at,
        };
        view.tasks.set(execId, task);
      } else {
        task.state = "Skipped";
        task.endedAt = event.at;
      }
      view.connectors.set(task.phaseId, {
        exec_id: task.execId,
        task_id: task.taskId,
        summary: str(p, "summary"),
        at: event.at,
      });
      break;
    }
    case "AwaitingExternal": {
      const token = p["token"] as Record<string, unknown>;
      const execId = String(token["task_exec_id"]);
      view.tokens.set(String(token["token_id"]), {
        token_id: String(token["token_id"]),
        instance_id: view.instanceId,
        task_exec_id: execId,
        destination: String(token["destination"]),
        requested_details: token["requested_details"] as TokenDto["requested_details"],
        issued_at: event.at,
        deadline: String(token["deadline"]),
        state: "Dispatched",
      });
      const task = view.tasks.get(execId);
      if (task) task.state = "AwaitingExternal";
      break;
    }
    case "ExternalReceived": {
      const token = view.tokens.get(str(p, "token_id"));
      if (token) {
        token.state = "Responded";
        const task = view.tasks.get(token.task_exec_id);
        if (task) {
          task.state = "InProgress";
          task.inputs.push(str(p, "entity_id"));
        }
      }
      break;
    }
    case "DecisionRaised": {
      const d = p["decision"] as Record<string, unknown>;
      view.decisions.set(String(d["id"]), {
        id: String(d["id"]),
        instance_id: view.instanceId,
        kind: d["kind"] as DecisionDto["kind"],
        options: [...(d["options"] as string[])],
        context: d["context"] as Record<string, unknown>,
        raised_at: event.at,
        chosen: null,
        decided_by: null,
        decided_at: null,
      });
      if ((d["kind"] as string) === "TokenExpiry") {
        const ctx = d["context"] as Record<string, unknown>;
        const token = view.tokens.get(String(ctx["token_id"]));
        if (token) token.state = "Expired";
      }
      break;
    }
    case "DecisionResolved": {
      const decision = view.decisions.get(str(p, "decision_id"));
      if (decision) {
        decision.chosen = str(p, "choice");
        decision.decided_by = str(p, "actor");
        decision.decided_at = event.at;
      }
      const effect = p["effect"] as Record<string, unknown> | undefined;
      if (effect && typeof effect["resume_exec"] === "string") {
        const task = view.tasks.get(effect["resume_exec"]);
        if (task) task.state = "InProgress";
      }
      break;
    }
    case "PhaseEntered":
    case "LoopBack": {
      enterPhase(view, event);
      break;
    }
    case "PhaseCompleted": {
      for (const phase of view.phases) {
        if (
          phase.phaseId === str(p, "phase_id") &&
          phase.iteration === Number(p["iteration"]) &&
          phase.state === "Active"
        ) {
          phase.state = "Completed";
        }
      }
      if (p["instance_completed"]) view.status = "Completed";
      break;
    }
    case "CommandRejected": {
      view.rejections.push({
        seq: event.seq,
        command: str(p, "command"),
        code: str(p, "code"),
        message: str(p, "message"),
      });
      break;
    }
  }
  view.lastSeq = event.seq;
}

export function emptyView(): InstanceView {
  return {
    instanceId: "",
    modelVersion: "",
    status: "Active",
    createdBy: "",
    lastSeq: 0,
    phases: [],
    tasks: new Map(),
    decisions: new Map(),
    tokens: new Map(),
    connectors: new Map(),
    rejections: [],
  };
}

/** Fold a contiguous batch into the view (mutating); throws GapError on a hole. */
export function projectEvents(view: InstanceView, events: EngineEvent[]): InstanceView {
  for (const event of events) {
    if (event.seq !== view.lastSeq + 1) {
      throw new GapError(view.lastSeq + 1, event.seq);
    }
    applyEvent(view, event);
  }
  return view;
}

export function pendingDecisions(view: InstanceView): DecisionDto[] {
  return [...view.decisions.values()]
    .filter((d) => d.decided_at === null)
    .sort((a, b) =>
      a.raised_at === b.raised_at
        ? a.id.localeCompare(b.id)
        : a.raised_at.localeCompare(b.raised_at)
    );
}

export function outstandingTokens(view: InstanceView): TokenDto[] {
  return [...view.tokens.values()]
    .filter((t) => t.state === "Dispatched")
    .sort((a, b) => a.token_id.localeCompare(b.token_id));
}

export function currentPhase(view: InstanceView): PhaseView | undefined {
  return activePhase(view);
}

/** Field-by-field check of the projection against the server's snapshot. */
export function viewMatchesSnapshot(
  view: InstanceView,
  snapshot: import("./types.js").InstanceSnapshot
): boolean {
  if (
    view.instanceId !== snapshot.id ||
    view.modelVersion !== snapshot.model_version ||
    view.status !== snapshot.status ||
    view.lastSeq !== snapshot.last_seq
  ) {
    return false;
  }
  const phasesMatch =
    view.phases.length === snapshot.phase_executions.length &&
    view.phases.every((p, i) => {
      const s = snapshot.phase_executions[i]!;
      return (
        p.phaseId === s.phase_id &&
        p.iteration === s.iteration &&
        p.state === s.state &&
        p.enteredVia === s.entered_via &&
        p.entryTaskId === s.entry_task_id
      );
    });
  if (!phasesMatch) return false;
  const snapshotTasks = Object.values(snapshot.task_executions);
  if (view.tasks.size !== snapshotTasks.length) return false;
  for (const s of snapshotTasks) {
    const t = view.tasks.get(s.exec_id);
    if (
      !t ||
      t.taskId !== s.task_id ||
      t.state !== s.state ||
      t.iteration !== s.iteration ||
      t.inputs.join() !== s.inputs.join() ||
      t.outputs.join() !== s.outputs.join()
    ) {
      return false;
    }
  }
  const snapshotDecisions = Object.values(snapshot.decisions);
  if (view.decisions.size !== snapshotDecisions.length) return false;
  for (const s of snapshotDecisions) {
    const d = view.decisions.get(s.id);
    if (
      !d ||
      d.kind !== s.kind ||
      d.options.join() !== s.options.join() ||
      d.chosen !== s.chosen ||
      d.decided_by !== s.decided_by
    ) {
      return false;
    }
  }
  const snapshotTokens = Object.values(snapshot.tokens);
  if (view.tokens.size !== snapshotTokens.length) return false;
  for (const s of snapshotTokens) {
    const t = view.tokens.get(s.token_id);
    if (!t || t.state !== s.state || t.task_exec_id !== s.task_exec_id) return false;
  }
  for (const [phaseId, connector] of Object.entries(snapshot.connectors)) {
    const last = view.connectors.get(phaseId) ?? null;
    const snapLast = connector.last_activity;
    if ((last === null) !== (snapLast === null)) return false;
    if (last && snapLast && last.exec_id !== snapLast.exec_id) return false;
  }
  return true;
}
