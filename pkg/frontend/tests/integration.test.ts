/**
 * Scripted-session round trip against a live daemon: attach through the
 * form, wait for the guest to run, suspend the job, take a snapshot, and
 * restore — all through the dashboard's own code paths over real HTTP.
 */

import { spawn, ChildProcess } from "node:child_process";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ControlApi } from "../src/api.js";
import { Dashboard } from "../src/main.js";
import type { StatusDoc } from "../src/types.js";

const here = dirname(fileURLToPath(import.meta.url));

let child: ChildProcess;
let controlUrl = "";
let projectUrl = "";
let weakKey = "";

function readEndpoints(proc: ChildProcess): Promise<void> {
  return new Promise((resolve, reject) => {
    let buffer = "";
    const timer = setTimeout(
      () => reject(new Error(`daemon launch timed out: ${buffer}`)), 30_000);
    proc.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const line = buffer.split("\n").find((l) => l.trim().startsWith("{"));
      if (line) {
        const doc = JSON.parse(line);
        controlUrl = doc.control;
        projectUrl = doc.project;
        weakKey = doc.key;
        clearTimeout(timer);
        resolve();
      }
    });
    proc.stderr!.on("data", (chunk: Buffer) => { buffer += chunk.toString(); });
    proc.on("exit", (code) =>
      reject(new Error(`daemon exited early (${code}): ${buffer}`)));
  });
}

async function waitFor(predicate: (doc: StatusDoc) => boolean,
                       api: ControlApi, what: string,
                       timeoutMs = 30_000): Promise<StatusDoc> {
  const deadline = Date.now() + timeoutMs;
  let last: StatusDoc = { phase: "?" };
  while (Date.now() < deadline) {
    last = await api.status();
    if (predicate(last)) return last;
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error(`timed out waiting for ${what}; last=${JSON.stringify(last)}`);
}

beforeAll(async () => {
  child = spawn("python3", [join(here, "launch_daemon.py")],
                { stdio: ["pipe", "pipe", "pipe"] });
  await readEndpoints(child);
});

afterAll(() => {
  child.stdin?.end();
  child.kill("SIGTERM");
});

describe("live daemon round trip", () => {
  it("attach → suspend-job → snapshot-now → restore", async () => {
    const api = new ControlApi(controlUrl);
    const statusRoot = document.createElement("div");
    const formRoot = document.createElement("div");
    document.body.appendChild(statusRoot);
    document.body.appendChild(formRoot);
    const dashboard = new Dashboard(api, statusRoot, formRoot);
    dashboard.start();
    try {
      // drive the real attach form
      (formRoot.querySelector("#attach-url") as HTMLInputElement).value = projectUrl;
      (formRoot.querySelector("#attach-key") as HTMLInputElement).value = weakKey;
      (formRoot.querySelector("#attach-form") as HTMLFormElement)
        .dispatchEvent(new Event("submit", { cancelable: true }));

      await waitFor((d) => d.phase === "guest_running" && !!d.guest?.unit_id,
                    api, "guest running with a unit");
      await dashboard.poll();
      const suspendButton = statusRoot.querySelector(
        'button[data-action="suspend_job"]') as HTMLButtonElement;
      expect(suspendButton.disabled).toBe(false);
      suspendButton.click();
      const suspended = await waitFor(
        (d) => d.guest?.job_suspended === true, api, "job suspended");
      expect(suspended.phase).toBe("guest_running");  // VM itself still runs

      await dashboard.poll();
      const snapshotButton = statusRoot.querySelector(
        'button[data-action="snapshot_now"]') as HTMLButtonElement;
      snapshotButton.click();
      const snapped = await waitFor(
        (d) => (d.snapshots ?? []).length >= 1, api, "a snapshot");
      const snapshotId = snapped.snapshots![0].snapshot_id;

      await dashboard.poll();
      const restoreButton = statusRoot.querySelector(
        'button[data-action="restore"]') as HTMLButtonElement;
      restoreButton.click();
      const restored = await waitFor(
        (d) => d.phase === "guest_running"
          && (d.snapshots ?? []).some((s) => s.snapshot_id === snapshotId),
        api, "restored to guest_running");
      expect(restored.guest?.state).toBe("running");

      // the timeline renders what the API reported
      await dashboard.poll();
      const item = statusRoot.querySelector(".snapshot") as HTMLElement;
      expect(item.dataset.snapshotId).toBe(snapshotId);
    } finally {
      dashboard.stop();
    }
  });
});
