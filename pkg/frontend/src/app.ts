/** Console wiring: panels over the projected view, actions over the client.
 *
 * Every click maps to exactly one endpoint call under the configured agent
 * id; the view only ever changes when the next poll folds the server's
 * events (optimistic updates are deliberately absent, so concurrent
 * operators converge by feed order).
 */

import { ApiClient, ApiFailure, submitDecision } from "./api.js";
import { LabelBook, toCard } from "./labels.js";
import { countsOf, renderLineageSvg } from "./lineage.js";
import { InstancePoller } from "./poller.js";
import {
  InstanceView,
  currentPhase,
  outstandingTokens,
  pendingDecisions,
} from "./projection.js";

const POLL_INTERVAL_MS = 1000;

interface AppState {
  client: ApiClient;
  labels: LabelBook;
  poller: InstancePoller | null;
  instanceId: string | null;
  readyTasks: string[];
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: Array<Node | string>
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

function note(message: string, kind: "info" | "error" = "info"): void {
  const bar = byId("notice");
  bar.textContent = message;
  bar.className = `notice ${kind}`;
  setTimeout(() => {
    if (bar.textContent === message) bar.textContent = "";
  }, 4000);
}

async function act<T>(state: AppState, run: () => Promise<T>): Promise<T | undefined> {
  try {
    const result = await run();
    await state.poller?.pollOnce();
    return result;
  } catch (err) {
    if (err instanceof ApiFailure) {
      note(`${err.code}: ${err.message}`, "error");
      return undefined;
    }
    throw err;
  }
}

function renderPhases(state: AppState, view: InstanceView): void {
  const host = byId("phases");
  host.replaceChildren();
  for (const phase of view.phases) {
    host.append(
      el(
        "div",
        { class: `phase ${phase.state === "Active" ? "active" : "done"}` },
        el("span", { class: "phase-name" }, state.labels.phase(phase.phaseId)),
        el("span", { class: "phase-meta" }, `iteration ${phase.iteration} · ${phase.state}` +
          (phase.enteredVia === "LoopBack" ? " · loop-back" : ""))
      )
    );
  }
  const status = byId("status");
  status.textContent = `${view.instanceId} · ${view.status} · seq ${view.lastSeq}`;
}

function renderTasks(state: AppState, view: InstanceView): void {
  const host = byId("tasks");
  host.replaceChildren();
  const active = currentPhase(view);
  for (const taskId of state.readyTasks) {
    const row = el(
      "div",
      { class: "task ready" },
      el("span", {}, state.labels.task(taskId)),
      el("button", { "data-action": `start:${taskId}` }, "start"),
      el("button", { "data-action": `skip:${taskId}` }, "request skip")
    );
    host.append(row);
  }
  if (active) {
    for (const task of view.tasks.values()) {
      if (task.phaseId !== active.phaseId || task.iteration !== active.iteration) continue;
      const row = el(
        "div",
        { class: `task ${task.state.toLowerCase()}` },
        el("span", {}, `${state.labels.task(task.taskId)} — ${task.state} (${task.actor})`)
      );
      if (task.state === "InProgress") {
        row.append(
          el("button", { "data-action": `complete:${task.taskId}` }, "complete"),
          el("button", { "data-action": `dispatch:${task.taskId}` }, "consult…")
        );
      }
      host.append(row);
    }
  }
}

function renderDecisions(state: AppState, view: InstanceView): void {
  const host = byId("decisions");
  host.replaceChildren();
  const pending = pendingDecisions(view);
  if (pending.length === 0) {
    host.append(el("p", { class: "muted" }, "no pending decisions"));
    return;
  }
  for (const decision of pending) {
    const card = toCard(decision, state.labels);
    const select = el("select", { id: `choice-${card.id}` }) as HTMLSelectElement;
    select.append(el("option", { value: "" }, "choose…"));
    for (const option of card.options) {
      select.append(el("option", { value: option.value }, option.label));
    }
    const button = el("button", { "data-action": `resolve:${card.id}` }, "resolve");
    const body = el(
      "div",
      { class: "card" },
      el("h3", {}, card.title),
      card.lastActivitySummary
        ? el("p", { class: "muted" }, `last activity: ${card.lastActivitySummary}`)
        : "",
      select,
      button
    );
    host.append(body);
  }
}

function renderTokens(state: AppState, view: InstanceView): void {
  const host = byId("tokens");
  host.replaceChildren();
  const open = outstandingTokens(view);
  if (open.length === 0) {
    host.append(el("p", { class: "muted" }, "no outstanding tokens"));
    return;
  }
  for (const token of open) {
    host.append(
      el(
        "div",
        { class: "card" },
        el("h3", {}, `${token.token_id} → ${token.destination}`),
        el("p", { class: "muted" }, token.requested_details.text ?? ""),
        el("button", { "data-action": `respond:${token.token_id}` }, "answer as stakeholder")
      )
    );
  }
}

async function renderTrail(state: AppState): Promise<void> {
  if (!state.instanceId) return;
  const { trail } = await state.client.trail(state.instanceId);
  const host = byId("trail");
  host.replaceChildren();
  for (const activity of trail) {
    host.append(
      el(
        "div",
        { class: "trail-row" },
        el("span", { class: "trail-type" }, String(activity["pcp:type"])),
        el("span", {}, activity.id),
        el("span", { class: "muted" }, (activity.agents ?? []).join(", "))
      )
    );
  }
}

async function showLineage(state: AppState, entityId: string): Promise<void> {
  const graph = await state.client.lineage(entityId);
  const host = byId("lineage");
  const counts = countsOf(graph);
  byId("lineage-counts").textContent = `${counts.nodes} nodes, ${counts.edges} edges`;
  host.innerHTML = renderLineageSvg(graph);
}

function wireActions(state: AppState): void {
  document.body.addEventListener("click", (raw) => {
    const target = raw.target as HTMLElement;
    const action = target.getAttribute("data-action");
    if (!action || !state.instanceId) return;
    const [verb, arg] = action.split(":", 2) as [string, string];
    const iid = state.instanceId;
    if (verb === "start") {
      void act(state, () => state.client.startTask(iid, arg));
    } else if (verb === "complete") {
      const outputs = prompt("output artifact ids (comma separated)", "") ?? "";
      void act(state, () =>
        state.client.completeTask(iid, arg, outputs.split(",").map((s) => s.trim()).filter(Boolean))
      );
    } else if (verb === "skip") {
      const reason = prompt("why skip this task?", "") ?? "";
      if (reason) void act(state, () => state.client.skipTask(iid, arg, reason));
    } else if (verb === "dispatch") {
      const destination = prompt("stakeholder id", "") ?? "";
      const text = prompt("what do you need from them?", "") ?? "";
      if (destination && text) {
        void act(state, () => state.client.dispatchToken(iid, arg, destination, text, 3600));
      }
    } else if (verb === "resolve") {
      const select = document.getElementById(`choice-${arg}`) as HTMLSelectElement | null;
      const choice = select?.value ?? "";
      if (!choice) return; // no option selected: no request
      const decision = state.poller?.view.decisions.get(arg);
      if (!decision) return;
      void act(state, async () => {
        const outcome = await submitDecision(state.client, decision, choice);
        if (outcome === "lost") note("another operator decided this first");
      });
    } else if (verb === "respond") {
      const content = prompt("response content", "") ?? "";
      if (content) {
        void act(state, () =>
          state.client.respondToken(arg, { kind: "document", content })
        );
      }
    } else if (verb === "transition") {
      void act(state, () => state.client.requestTransition(iid));
    } else if (verb === "loopback") {
      const phase = prompt("loop back to which phase id?", "") ?? "";
      const reason = prompt("reason", "") ?? "";
      if (phase && reason) void act(state, () => state.client.loopBack(iid, phase, reason));
    }
  });
  byId("lineage-go").addEventListener("click", () => {
    const input = byId("lineage-entity") as HTMLInputElement;
    if (input.value) void showLineage(state, input.value);
  });
}

async function selectInstance(state: AppState, instanceId: string): Promise<void> {
  state.poller?.stop();
  state.instanceId = instanceId;
  const snapshot = await state.client.getInstance(instanceId);
  state.labels = new LabelBook(await state.client.metaModel(snapshot.instance.model_version));
  state.poller = new InstancePoller(state.client, instanceId, POLL_INTERVAL_MS, (view) => {
    void state.client.readyTasks(instanceId).then(({ ready_tasks }) => {
      state.readyTasks = ready_tasks;
      renderPhases(state, view);
      renderTasks(state, view);
      renderDecisions(state, view);
      renderTokens(state, view);
      void renderTrail(state);
    });
  });
  state.poller.start();
}

export async function boot(): Promise<void> {
  const params = new URLSearchParams(location.search);
  const client = new ApiClient({
    baseUrl: params.get("server") ?? "http://127.0.0.1:8000",
    agentId: params.get("agent") ?? "operator",
  });
  const state: AppState = {
    client,
    labels: new LabelBook(),
    poller: null,
    instanceId: null,
    readyTasks: [],
  };
  byId("agent").textContent = client.agentId;
  wireActions(state);

  const picker = byId("instance-picker") as HTMLSelectElement;
  const refreshInstances = async () => {
    const { instances } = await client.listInstances();
    picker.replaceChildren(el("option", { value: "" }, "select instance…"));
    for (const id of instances) picker.append(el("option", { value: id }, id));
  };
  picker.addEventListener("change", () => {
    if (picker.value) void selectInstance(state, picker.value);
  });
  byId("new-instance").addEventListener("click", () => {
    void act(state, async () => {
      const created = await client.createInstance();
      await refreshInstances();
      picker.value = created.instance_id;
      await selectInstance(state, created.instance_id);
    });
  });
  await refreshInstances();
}

if (typeof document !== "undefined" && document.getElementById("instance-picker")) {
  void boot();
}
