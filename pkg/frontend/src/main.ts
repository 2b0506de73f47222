/**
 * Dashboard controller: a one-second status poll drives rendering; every
 * mutation comes from an explicit button or the attach form, with at most
 * one mutation in flight (buttons grey out while it runs).
 */

import { ApiError, ControlApi } from "./api.js";
import { validateAttachForm } from "./state.js";
import type { ActionSpec, StatusDoc } from "./types.js";
import { renderStatus } from "./view.js";

export const POLL_INTERVAL_MS = 1000;

export class Dashboard {
  private busy = false;
  private lastDoc: StatusDoc = { phase: "detached" };
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(private readonly api: ControlApi,
              private readonly statusRoot: HTMLElement,
              private readonly formRoot: HTMLElement) {}

  start(): void {
    this.renderForm();
    this.render();
    void this.poll();
    this.timer = setInterval(() => void this.poll(), POLL_INTERVAL_MS);
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  async poll(): Promise<void> {
    try {
      this.lastDoc = await this.api.status();
      this.clearBanner();
    } catch (err) {
      this.showBanner(`daemon unreachable, retrying: ${(err as Error).message}`);
    }
    this.render();
  }

  private render(): void {
    renderStatus(this.statusRoot, this.lastDoc,
                 { onAction: (action) => void this.runAction(action) },
                 this.busy);
  }

  async runAction(action: ActionSpec): Promise<void> {
    if (this.busy) return;
    this.busy = true;
    this.render();
    try {
      if (action.kind === "command") {
        await this.api.command(action.payload!);
      } else if (action.kind === "vmcontrol") {
        await this.api.vmcontrol(action.payload!);
      } else if (action.kind === "snapshot") {
        await this.api.snapshotNow();
      } else {
        await this.api.restore();
      }
      this.clearBanner();
    } catch (err) {
      this.showBanner((err as ApiError).message);
    } finally {
      this.busy = false;
      await this.poll();
    }
  }

  async submitAttach(url: string, key: string, interval: number,
                     keep: number): Promise<boolean> {
    const problem = validateAttachForm(url, key, interval);
    if (problem) {
      this.showFormError(problem);
      return false;  // invalid input: no request leaves the browser
    }
    this.showFormError("");
    try {
      await this.api.attach(url, key, interval, keep);
      await this.poll();
      return true;
    } catch (err) {
      this.showFormError((err as ApiError).message);
      return false;
    }
  }

  private renderForm(): void {
    this.formRoot.innerHTML = `
      <form id="attach-form">
        <h2>Attach to a project</h2>
        <label>Project URL <input name="url" id="attach-url" /></label>
        <label>Weak account key <input name="key" id="attach-key" /></label>
        <label>Checkpoint interval (s)
          <input name="interval" id="attach-interval" type="number" value="60" /></label>
        <label>Keep snapshots
          <input name="keep" id="attach-keep" type="number" value="1" /></label>
        <button type="submit" id="attach-submit">Attach</button>
        <span id="attach-error" class="form-error"></span>
      </form>`;
    const form = this.formRoot.querySelector("#attach-form") as HTMLFormElement;
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      const url = (this.formRoot.querySelector("#attach-url") as HTMLInputElement).value;
      const key = (this.formRoot.querySelector("#attach-key") as HTMLInputElement).value;
      const interval = Number((this.formRoot.querySelector("#attach-interval") as HTMLInputElement).value);
      const keep = Number((this.formRoot.querySelector("#attach-keep") as HTMLInputElement).value);
      void this.submitAttach(url, key, interval, keep);
    });
  }

  private showFormError(text: string): void {
    const slot = this.formRoot.querySelector("#attach-error");
    if (slot) slot.textContent = text;
  }

  private showBanner(text: string): void {
    this.lastDoc = { ...this.lastDoc, last_error: text };
  }

  private clearBanner(): void {
    // banner content rebinds to the API's own error fields on render
  }
}

export function boot(doc: Document, baseUrl = ""): Dashboard {
  const api = new ControlApi(baseUrl);
  const statusRoot = doc.getElementById("status")!;
  const formRoot = doc.getElementById("attach")!;
  const dashboard = new Dashboard(api, statusRoot, formRoot);
  dashboard.start();
  return dashboard;
}

declare global {
  interface Window { vboincDashboard?: Dashboard }
}

if (typeof window !== "undefined" && typeof document !== "undefined"
    && document.getElementById("status")) {
  window.vboincDashboard = boot(document);
}
