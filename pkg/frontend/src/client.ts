// Thin typed client over the gateway's documented HTTP surface.
// Every console capability maps to one of these endpoints.

import { AuthError, readEventStream } from "./sse.js";
import type {
  ActivityRecord,
  ApiEvent,
  JobRecord,
  MachineListing,
  VizHandoff,
  WorkflowDoc,
} from "./types.js";

export interface LaunchResult {
  ok: boolean;
  status: number;
  activityId?: string;
  detail?: string;
}

export class GatewayClient {
  constructor(
    private baseUrl: string,
    private token: string,
  ) {}

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    return { Authorization: `Bearer ${this.token}`, ...extra };
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await fetch(this.baseUrl + path, { headers: this.headers() });
    if (response.status === 401) {
      throw new AuthError("unauthorized");
    }
    if (!response.ok) {
      throw new Error(`${path}: HTTP ${response.status}`);
    }
    return (await response.json()) as T;
  }

  listWorkflows(): Promise<WorkflowDoc[]> {
    return this.getJson("/api/workflows");
  }

  listMachines(): Promise<MachineListing[]> {
    return this.getJson("/api/machines");
  }

  listActivities(): Promise<ActivityRecord[]> {
    return this.getJson("/api/activities");
  }

  activityJobs(activityId: string): Promise<JobRecord[]> {
    return this.getJson(`/api/activities/${activityId}/jobs`);
  }

  async launchActivity(
    workflowId: string,
    context: Record<string, unknown>,
  ): Promise<LaunchResult> {
    const response = await fetch(this.baseUrl + "/api/activities", {
      method: "POST",
      headers: this.headers({ "Content-Type": "application/json" }),
      body: JSON.stringify({ workflow_id: workflowId, context }),
    });
    if (response.status === 401) {
      throw new AuthError("unauthorized");
    }
    const body = await response.json().catch(() => ({}));
    if (response.status === 201) {
      return { ok: true, status: 201, activityId: body.activity_id };
    }
    return {
      ok: false,
      status: response.status,
      detail:
        typeof body.detail === "string" ? body.detail : JSON.stringify(body.detail),
    };
  }

  async cancelActivity(activityId: string): Promise<boolean> {
    const response = await fetch(
      this.baseUrl + `/api/activities/${activityId}/cancel`,
      { method: "POST", headers: this.headers() },
    );
    if (response.status === 401) {
      throw new AuthError("unauthorized");
    }
    return response.status === 202;
  }

  async vizHandoff(activityId: string): Promise<VizHandoff | null> {
    const response = await fetch(
      this.baseUrl + `/api/activities/${activityId}/viz`,
      { headers: this.headers() },
    );
    if (response.status === 401) {
      throw new AuthError("unauthorized");
    }
    if (response.status === 404) {
      return null; // no results yet
    }
    if (!response.ok) {
      throw new Error(`viz: HTTP ${response.status}`);
    }
    return (await response.json()) as VizHandoff;
  }

  /** Follow the event stream from `since`, reconnecting with the last seen
   * sequence number so the feed has no gaps and no duplicates. */
  async streamEvents(
    since: number,
    onEvent: (event: ApiEvent) => void,
    signal?: AbortSignal,
  ): Promise<void> {
    let cursor = since;
    for (;;) {
      try {
        await readEventStream(
          this.baseUrl + `/api/events?since=${cursor}`,
          this.headers(),
          (raw) => {
            const event = JSON.parse(raw.data) as ApiEvent;
            cursor = Math.max(cursor, event.seq);
            onEvent(event);
          },
          signal,
        );
      } catch (error) {
        if (error instanceof AuthError || signal?.aborted) {
          throw error;
        }
        // transient network failure: fall through to reconnect
      }
      if (signal?.aborted) {
        return;
      }
      await new Promise((resolve) => setTimeout(resolve, 1000));
    }
  }
}
