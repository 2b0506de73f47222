/**
 * DOM rendering.  Every number and label on screen comes straight from the
 * last status document; the view invents nothing beyond unit formatting.
 */

import { ACTIONS, enabledActions, formatBytes, formatMillis } from "./state.js";
import type { ActionSpec, StatusDoc } from "./types.js";

export interface ViewHandlers {
  onAction(action: ActionSpec): void;
}

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderTransfers(doc: StatusDoc): HTMLElement {
  const box = el("section", "transfers");
  box.appendChild(el("h2", undefined, "Transfers"));
  for (const transfer of doc.transfers ?? []) {
    const row = el("div", "transfer");
    row.dataset.blobId = transfer.blob_id;
    const pct = transfer.total_bytes > 0
      ? Math.floor((transfer.received_bytes / transfer.total_bytes) * 100)
      : 0;
    row.appendChild(el("span", "transfer-name",
                       `${transfer.blob_id} (${transfer.status})`));
    const bar = el("div", "bar");
    const fill = el("div", "bar-fill");
    fill.style.width = `${pct}%`;
    bar.appendChild(fill);
    row.appendChild(bar);
    row.appendChild(el("span", "transfer-bytes",
      `${formatBytes(transfer.received_bytes)} / ${formatBytes(transfer.total_bytes)}`));
    box.appendChild(row);
  }
  return box;
}

function renderResources(doc: StatusDoc): HTMLElement {
  const box = el("section", "resources");
  box.appendChild(el("h2", undefined, "Resources"));
  const guest = doc.guest;
  if (!guest) {
    box.appendChild(el("p", "muted", "no guest"));
    return box;
  }
  const dl = el("dl");
  const rows: [string, string][] = [
    ["Guest state", guest.state],
    ["Address", guest.address],
    ["Unit", guest.unit_id ?? "idle"],
    ["CPU ticks", String(guest.resources.cpu_ticks_used)],
    ["Memory (peak)", formatBytes(guest.resources.memory_in_use)],
    ["Memory (current)", formatBytes(guest.memory_current)],
    ["Disk written", formatBytes(guest.resources.disk_bytes_written)],
    ["Job suspended", guest.job_suspended ? "yes" : "no"],
  ];
  for (const [label, value] of rows) {
    const dt = el("dt", undefined, label);
    const dd = el("dd", undefined, value);
    dd.dataset.field = label.toLowerCase().replace(/[^a-z]+/g, "-");
    dl.appendChild(dt);
    dl.appendChild(dd);
  }
  box.appendChild(dl);
  return box;
}

function renderSnapshots(doc: StatusDoc): HTMLElement {
  const box = el("section", "snapshots");
  box.appendChild(el("h2", undefined, "Snapshot timeline"));
  const list = el("ol", "timeline");
  for (const snap of doc.snapshots ?? []) {
    const item = el("li", "snapshot");
    item.dataset.snapshotId = snap.snapshot_id;
    const layers = Object.values(snap.layer_bytes ?? {})
      .reduce((a, b) => a + b, 0);
    item.textContent =
      `${snap.snapshot_id} @ ${formatMillis(snap.created_at)} — memory ` +
      `${formatBytes(snap.memory_state_bytes)}, layers ${formatBytes(layers)}, ` +
      `cost ${formatMillis(snap.wall_cost)}`;
    list.appendChild(item);
  }
  if (!list.childElementCount) list.appendChild(el("li", "muted", "none yet"));
  box.appendChild(list);
  return box;
}

function renderButtons(doc: StatusDoc, handlers: ViewHandlers,
                       busy: boolean): HTMLElement {
  const box = el("section", "controls");
  box.appendChild(el("h2", undefined, "Controls"));
  const enabled = enabledActions(doc.phase);
  for (const action of ACTIONS) {
    const button = el("button", "control") as HTMLButtonElement;
    button.textContent = action.label;
    button.dataset.action = action.id;
    button.disabled = busy || !enabled.has(action.id);
    button.addEventListener("click", () => handlers.onAction(action));
    box.appendChild(button);
  }
  return box;
}

export function renderStatus(container: HTMLElement, doc: StatusDoc,
                             handlers: ViewHandlers, busy = false): void {
  container.textContent = "";
  const header = el("header");
  const badge = el("span", `phase-badge phase-${doc.phase}`, doc.phase);
  badge.id = "phase-badge";
  header.appendChild(badge);
  if (doc.project_url) {
    header.appendChild(el("span", "project", doc.project_url));
  }
  container.appendChild(header);
  const error = doc.last_error || doc.failure_reason;
  if (error) {
    const banner = el("div", "error-banner", error);
    banner.id = "error-banner";
    container.appendChild(banner);
  }
  container.appendChild(renderButtons(doc, handlers, busy));
  container.appendChild(renderTransfers(doc));
  container.appendChild(renderResources(doc));
  container.appendChild(renderSnapshots(doc));
  if (doc.settings) {
    const settings = el("footer", "settings",
      `checkpoint every ${doc.settings.checkpoint_interval}s, ` +
      `keep ${doc.settings.keep_latest}`);
    container.appendChild(settings);
  }
}
