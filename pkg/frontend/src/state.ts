/**
 * Button enablement derives entirely from the shared phase table: an action
 * is available exactly when the lifecycle state machine has a legal
 * transition for it (job-level commands relay only while the guest runs).
 * The daemon's own test suite asserts the same table against its state
 * machine, so both sides stay in lockstep.
 */

import table from "./phase-actions.json";
import type { ActionSpec } from "./types.js";

interface PhaseTable {
  transitions: Record<string, Record<string, string>>;
  action_events: Record<string, string>;
  job_actions: string[];
  snapshot_phases: string[];
  actions_by_phase: Record<string, string[]>;
}

export const PHASE_TABLE = table as PhaseTable;

export const ALL_PHASES = Object.keys(PHASE_TABLE.transitions);

export const ACTIONS: ActionSpec[] = [
  { id: "suspend_job", label: "Suspend job", kind: "command", payload: "suspend" },
  { id: "resume_job", label: "Resume job", kind: "command", payload: "resume" },
  { id: "nomorework", label: "No more work", kind: "command", payload: "nomorework" },
  { id: "allowmorework", label: "Allow more work", kind: "command", payload: "allowmorework" },
  { id: "update", label: "Update", kind: "command", payload: "update" },
  { id: "reset", label: "Reset job", kind: "command", payload: "reset" },
  { id: "detach_job", label: "Detach", kind: "command", payload: "detach" },
  { id: "pause_vm", label: "Pause VM", kind: "vmcontrol", payload: "pause" },
  { id: "resume_vm", label: "Resume VM", kind: "vmcontrol", payload: "resume" },
  { id: "poweroff", label: "Power off VM", kind: "vmcontrol", payload: "poweroff" },
  { id: "snapshot_now", label: "Snapshot now", kind: "snapshot" },
  { id: "restore", label: "Restore latest", kind: "restore" },
];

export function enabledActions(phase: string): Set<string> {
  return new Set(PHASE_TABLE.actions_by_phase[phase] ?? []);
}

/** Recompute what must be enabled from the transition table alone; the
 * conformance test compares this against actions_by_phase. */
export function deriveEnabledFromTransitions(phase: string): Set<string> {
  const legal = PHASE_TABLE.transitions[phase] ?? {};
  const enabled = new Set<string>();
  for (const [action, event] of Object.entries(PHASE_TABLE.action_events)) {
    if (event in legal) enabled.add(action);
  }
  if (phase === "guest_running") {
    for (const action of PHASE_TABLE.job_actions) enabled.add(action);
  }
  if (PHASE_TABLE.snapshot_phases.includes(phase)) enabled.add("snapshot_now");
  return enabled;
}

export function formatBytes(n: number): string {
  if (n < 1024) return `${n} B`;
  const units = ["KiB", "MiB", "GiB", "TiB"];
  let value = n;
  let unit = "B";
  for (const next of units) {
    if (value < 1024) break;
    value /= 1024;
    unit = next;
  }
  return `${value.toFixed(value >= 100 ? 0 : 1)} ${unit}`;
}

export function formatMillis(ms: number): string {
  if (ms < 1000) return `${ms} ms`;
  const seconds = ms / 1000;
  if (seconds < 120) return `${seconds.toFixed(1)} s`;
  return `${(seconds / 60).toFixed(1)} min`;
}

export function validateAttachForm(url: string, key: string,
                                   interval: number): string | null {
  if (!url.trim()) return "project URL is required";
  try {
    const parsed = new URL(url);
    if (!parsed.host) return "project URL must include a host";
  } catch {
    return "project URL is not a valid URL";
  }
  if (!key.trim()) return "weak account key is required";
  if (!Number.isFinite(interval) || interval < 10) {
    return "checkpoint interval must be at least 10 seconds";
  }
  return null;
}
