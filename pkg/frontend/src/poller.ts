/** Cursor polling loop: fetch → fold → notify, with gap-triggered refetch.
 *
 * The console holds no state beyond this projection; killing the poller and
 * starting a fresh one (a page reload) rebuilds the identical view from the
 * feed alone.
 */

import type { ApiClient } from "./api.js";
import {
  GapError,
  InstanceView,
  emptyView,
  projectEvents,
} from "./projection.js";

export class InstancePoller {
  view: InstanceView = emptyView();
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;

  constructor(
    private readonly client: ApiClient,
    private readonly instanceId: string,
    private readonly intervalMs: number,
    private readonly onUpdate: (view: InstanceView) => void
  ) {}

  async pollOnce(): Promise<void> {
    if (this.inFlight) return;
    this.inFlight = true;
    try {
      const batch = await this.client.events(this.instanceId, this.view.lastSeq + 1);
      if (batch.events.length === 0) return;
      try {
        projectEvents(this.view, batch.events);
      } catch (err) {
        if (err instanceof GapError) {
          // Never skip events: rebuild from the start of the feed.
          const full = await this.client.events(this.instanceId, 1);
          this.view = projectEvents(emptyView(), full.events);
        } else {
          throw err;
        }
      }
      this.onUpdate(this.view);
    } finally {
      this.inFlight = false;
    }
  }

  start(): void {
    if (this.timer !== null) return;
    void this.pollOnce();
    this.timer = setInterval(() => void this.pollOnce(), this.intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
