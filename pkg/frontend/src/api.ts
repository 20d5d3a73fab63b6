/** Typed client over the service's HTTP endpoints.
 *
 * Every mutating call sends the operator's agent id and an idempotency key;
 * transient network failures retry with the same key, so a retried command
 * lands at most once. Domain errors surface as ApiFailure with the server's
 * stable error code.
 */

import type {
  ApiError,
  DecisionDto,
  EngineEvent,
  EventBatch,
  InstanceSnapshot,
  LineageGraph,
  MetaModelDocument,
  TokenDto,
  TrailActivity,
} from "./types.js";

export class ApiFailure extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string
  ) {
    super(message);
    this.name = "ApiFailure";
  }
}

export interface ClientConfig {
  baseUrl: string;
  agentId: string;
  fetchImpl?: typeof fetch;
  retries?: number;
}

let keyCounter = 0;

function freshKey(agentId: string): string {
  keyCounter += 1;
  return `${agentId}-${Date.now()}-${keyCounter}`;
}

export class ApiClient {
  private readonly fetchImpl: typeof fetch;
  private readonly retries: number;

  constructor(private readonly config: ClientConfig) {
    this.fetchImpl = config.fetchImpl ?? fetch;
    this.retries = config.retries ?? 2;
  }

  get agentId(): string {
    return this.config.agentId;
  }

  private async request<T>(
    method: "GET" | "POST",
    path: string,
    body?: unknown,
    idempotent = true
  ): Promise<T> {
    const headers: Record<string, string> = {
      "X-Agent-Id": this.config.agentId,
    };
    if (body !== undefined) headers["Content-Type"] = "application/json";
    if (method === "POST" && idempotent) {
      headers["Idempotency-Key"] = freshKey(this.config.agentId);
    }
    let lastError: unknown;
    for (let attempt = 0; attempt <= this.retries; attempt++) {
      let response: Response;
      try {
        response = await this.fetchImpl(`${this.config.baseUrl}${path}`, {
          method,
          headers,
          body: body === undefined ? undefined : JSON.stringify(body),
        });
      } catch (err) {
        lastError = err; // network failure: retry with the same key
        continue;
      }
      if (!response.ok) {
        let parsed: ApiError = { error: "unknown", message: response.statusText };
        try {
          parsed = (await response.json()) as ApiError;
        } catch {
          /* non-JSON error body */
        }
        throw new ApiFailure(response.status, parsed.error, parsed.message);
      }
      return (await response.json()) as T;
    }
    throw lastError instanceof Error ? lastError : new Error(String(lastError));
  }

  // -- instances ---------------------------------------------------------

  listInstances(): Promise<{ instances: string[] }> {
    return this.request("GET", "/instances");
  }

  createInstance(modelVersion?: string): Promise<{ instance_id: string; seqs: number[] }> {
    return this.request("POST", "/instances", modelVersion ? { model_version: modelVersion } : {});
  }

  getInstance(id: string): Promise<{ instance: InstanceSnapshot; ready_tasks: string[] }> {
    return this.request("GET", `/instances/${id}`);
  }

  readyTasks(id: string): Promise<{ ready_tasks: string[] }> {
    return this.request("GET", `/instances/${id}/tasks/ready`);
  }

  events(id: string, fromSeq: number): Promise<EventBatch> {
    return this.request("GET", `/instances/${id}/events?from=${fromSeq}`);
  }

  startTask(id: string, taskId: string): Promise<{ exec_id: string; seqs: number[] }> {
    return this.request("POST", `/instances/${id}/tasks/${taskId}/start`);
  }

  completeTask(
    id: string,
    taskId: string,
    outputs: string[],
    comment?: string
  ): Promise<{ exec_id: string; seqs: number[] }> {
    return this.request("POST", `/instances/${id}/tasks/${taskId}/complete`, {
      outputs,
      comment: comment ?? null,
    });
  }

  skipTask(id: string, taskId: string, reason: string): Promise<{ decision: DecisionDto }> {
    return this.request("POST", `/instances/${id}/tasks/${taskId}/skip`, { reason });
  }

  requestTransition(
    id: string,
    targetPhase?: string
  ): Promise<{ decision: DecisionDto | null; instance_completed: boolean }> {
    return this.request("POST", `/instances/${id}/transition`, {
      target_phase: targetPhase ?? null,
    });
  }

  loopBack(id: string, targetPhase: string, reason: string): Promise<{ decision: DecisionDto }> {
    return this.request("POST", `/instances/${id}/loopback`, {
      target_phase: targetPhase,
      reason,
    });
  }

  pendingDecisions(id: string): Promise<{ decisions: DecisionDto[] }> {
    return this.request("GET", `/instances/${id}/decisions/pending`);
  }

  resolveDecision(decisionId: string, choice: string): Promise<{ decision: DecisionDto }> {
    return this.request("POST", `/decisions/${decisionId}/resolve`, { choice });
  }

  // -- tokens & stakeholders ----------------------------------------------

  dispatchToken(
    id: string,
    taskId: string,
    destination: string,
    text: string,
    deadlineSeconds: number
  ): Promise<{ token: Record<string, unknown> }> {
    return this.request("POST", `/instances/${id}/tasks/${taskId}/dispatch`, {
      destination,
      text,
      deadline_s: deadlineSeconds,
    });
  }

  respondToken(
    tokenId: string,
    payload: { kind: string; content: string },
    responder?: string
  ): Promise<{ token: TokenDto }> {
    return this.request("POST", `/tokens/${tokenId}/response`, {
      payload,
      responder: responder ?? null,
    });
  }

  expireTokens(): Promise<{ decisions: DecisionDto[] }> {
    return this.request("POST", "/tokens/expire", {}, false);
  }

  listStakeholders(): Promise<{ stakeholders: Array<Record<string, string>> }> {
    return this.request("GET", "/stakeholders");
  }

  registerStakeholder(record: {
    id: string;
    name: string;
    department?: string;
    endpoint: string;
    kind?: string;
  }): Promise<{ stakeholder: Record<string, string> }> {
    return this.request("POST", "/stakeholders", record, false);
  }

  // -- provenance & models -------------------------------------------------

  trail(id: string): Promise<{ trail: TrailActivity[] }> {
    return this.request("GET", `/prov/instances/${id}/trail`);
  }

  lineage(entityId: string): Promise<LineageGraph> {
    return this.request("GET", `/prov/entities/${encodeURIComponent(entityId)}/lineage`);
  }

  metaModel(version: string): Promise<MetaModelDocument> {
    return this.request("GET", `/metamodels/${version}`);
  }
}

export type SubmitOutcome = "applied" | "lost";

/** Resolve a decision; a 409 already-decided means another operator won. */
export async function submitDecision(
  client: ApiClient,
  decision: DecisionDto,
  choice: string
): Promise<SubmitOutcome> {
  if (!decision.options.includes(choice)) {
    throw new Error(`choice ${choice} is not among the served options`);
  }
  try {
    await client.resolveDecision(decision.id, choice);
    return "applied";
  } catch (err) {
    if (err instanceof ApiFailure && err.code === "already-decided") {
      return "lost";
    }
    throw err;
  }
}
