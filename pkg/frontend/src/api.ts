/** Thin fetch client for the daemon's loopback control API. */

import type { StatusDoc } from "./types.js";

export class ApiError extends Error {
  constructor(message: string, public readonly status: number,
              public readonly errorType: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ControlApi {
  constructor(private readonly base: string,
              private readonly fetchFn: FetchLike =
                (input, init) => fetch(input, init)) {}

  private async request(method: string, path: string,
                        body?: unknown): Promise<any> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    let response: Response;
    try {
      response = await this.fetchFn(this.base + path, init);
    } catch (err) {
      throw new ApiError(`daemon unreachable: ${err}`, 0, "unreachable");
    }
    const doc = await response.json().catch(() => ({}));
    if (!response.ok) {
      throw new ApiError(doc.error ?? `HTTP ${response.status}`,
                         response.status, doc.error_type ?? "unknown");
    }
    return doc;
  }

  status(): Promise<StatusDoc> {
    return this.request("GET", "/status");
  }

  attach(projectUrl: string, weakKey: string, interval?: number,
         keep?: number): Promise<any> {
    const body: Record<string, unknown> = {
      project_url: projectUrl,
      weak_account_key: weakKey,
    };
    if (interval !== undefined) body.checkpoint_interval = interval;
    if (keep !== undefined) body.keep_latest = keep;
    return this.request("POST", "/attach", body);
  }

  command(command: string): Promise<any> {
    return this.request("POST", "/command", { command });
  }

  vmcontrol(action: string): Promise<any> {
    return this.request("POST", "/vmcontrol", { action });
  }

  snapshotNow(): Promise<any> {
    return this.request("POST", "/snapshot", {});
  }

  restore(): Promise<any> {
    return this.request("POST", "/restore", {});
  }

  snapshots(): Promise<any> {
    return this.request("GET", "/snapshots");
  }

  settings(interval?: number, keep?: number): Promise<any> {
    const body: Record<string, unknown> = {};
    if (interval !== undefined) body.checkpoint_interval = interval;
    if (keep !== undefined) body.keep_latest = keep;
    return this.request("POST", "/settings", body);
  }
}
