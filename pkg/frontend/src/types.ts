/** Shapes of the daemon's control-API documents the dashboard renders. */

export interface TransferView {
  blob_id: string;
  total_bytes: number;
  received_bytes: number;
  status: string;
}

export interface ResourceView {
  timestamp: number;
  cpu_ticks_used: number;
  memory_in_use: number;
  disk_bytes_written: number;
}

export interface SnapshotView {
  snapshot_id: string;
  created_at: number;
  wall_cost: number;
  memory_state_bytes: number;
  layer_bytes: Record<string, number>;
  unit_id: string | null;
}

export interface GuestView {
  state: string;
  address: string;
  resources: ResourceView;
  memory_current: number;
  unit_id: string | null;
  job_suspended: boolean;
  no_more_work: boolean;
}

export interface StatusDoc {
  phase: string;
  failure_reason?: string;
  session?: string | null;
  project_url?: string;
  host_id?: string;
  transfers?: TransferView[];
  snapshots?: SnapshotView[];
  settings?: { checkpoint_interval: number; keep_latest: number };
  acked_units?: string[];
  last_error?: string;
  freed_bytes_total?: number;
  guest?: GuestView | null;
}

export type ActionKind = "command" | "vmcontrol" | "snapshot" | "restore";

export interface ActionSpec {
  id: string;
  label: string;
  kind: ActionKind;
  payload?: string;
}
