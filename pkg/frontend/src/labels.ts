/** Human labels for ids, sourced from the instance's meta-model document.
 * The card never invents or filters options; it only decorates the ids the
 * server sent.
 */

import type { DecisionDto, LastActivity, MetaModelDocument } from "./types.js";

export interface DecisionCard {
  id: string;
  kind: DecisionDto["kind"];
  title: string;
  options: Array<{ value: string; label: string }>;
  lastActivitySummary: string | null;
  raisedAt: string;
}

export class LabelBook {
  private readonly taskNames = new Map<string, string>();
  private readonly phaseNames = new Map<string, string>();

  constructor(model?: MetaModelDocument) {
    if (model) {
      for (const phase of model.phases) {
        this.phaseNames.set(phase.id, phase.name);
        for (const task of phase.tasks) {
          this.taskNames.set(task.id, task.name);
        }
      }
    }
  }

  task(id: string): string {
    return this.taskNames.get(id) ?? id;
  }

  phase(id: string): string {
    return this.phaseNames.get(id) ?? id;
  }
}

const KIND_TITLES: Record<DecisionDto["kind"], string> = {
  PhaseEntry: "Choose the entry task",
  LoopBackTarget: "Choose where the loop-back resumes",
  SkipApproval: "Approve skipping a task",
  TokenExpiry: "An external request expired",
  NextTask: "Choose the next task",
};

export function decisionTitle(decision: DecisionDto, labels: LabelBook): string {
  const ctx = decision.context;
  switch (decision.kind) {
    case "PhaseEntry":
      return `${KIND_TITLES.PhaseEntry}: entering ${labels.phase(String(ctx["target_phase"]))}`;
    case "LoopBackTarget":
      return `${KIND_TITLES.LoopBackTarget}: back to ${labels.phase(String(ctx["target_phase"]))}`;
    case "SkipApproval":
      return `${KIND_TITLES.SkipApproval}: ${labels.task(String(ctx["task_id"]))}`;
    case "TokenExpiry":
      return `${KIND_TITLES.TokenExpiry}: ${String(ctx["token_id"])} to ${String(ctx["destination"])}`;
    default:
      return KIND_TITLES[decision.kind];
  }
}

function optionLabel(decision: DecisionDto, value: string, labels: LabelBook): string {
  if (decision.kind === "PhaseEntry" || decision.kind === "LoopBackTarget") {
    return labels.task(value);
  }
  return value;
}

/** Build the card exactly from what the server sent: same options, same order. */
export function toCard(decision: DecisionDto, labels: LabelBook): DecisionCard {
  const last = (decision.context["last_activity"] ?? null) as LastActivity | null;
  return {
    id: decision.id,
    kind: decision.kind,
    title: decisionTitle(decision, labels),
    options: decision.options.map((value) => ({
      value,
      label: optionLabel(decision, value, labels),
    })),
    lastActivitySummary: last ? last.summary : null,
    raisedAt: decision.raised_at,
  };
}
