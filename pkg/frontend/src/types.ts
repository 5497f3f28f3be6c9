// Wire types for the management service. These mirror the JSON the HTTP
// endpoints return; nothing here is invented on the console side.

export interface TierInfo {
  tier_id: string;
  tier_type: string;
  state: string;
}

export interface NodeInfo {
  node_id: string;
  state: string;
  last_beat: number | null;
  tiers: TierInfo[];
}

export interface TopologySnapshot {
  instance: string;
  beat_interval_ms: number;
  nodes: NodeInfo[];
}

/** One entry from GET /events. Beyond the envelope the payload varies by kind. */
export interface ConsoleEvent {
  seq: number;
  ts: number;
  event: string;
  node_id?: string;
  tier_id?: string;
  tier_type?: string;
  state?: string;
  stage?: string;
  promoted?: string;
  replaced?: string;
  reason?: string;
}

export interface EventBatch {
  events: ConsoleEvent[];
  latest: number;
}

export interface DemandCounts {
  counts: Record<string, number>;
  entries: unknown[];
}

export type Severity = "info" | "warning" | "critical";

export interface LogEntry {
  seq: number;
  ts: number;
  kind: string;
  severity: Severity;
  detail: string;
}

export type ConnectionState = "connecting" | "live" | "disconnected";

/**
 * Error body the service sends on any failure: the exception type name and
 * its message, verbatim. The console renders it without rewording.
 */
export interface ApiErrorBody {
  code: string;
  error: string;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly body: ApiErrorBody,
  ) {
    super(`${body.code}: ${body.error}`);
    this.name = "ApiError";
  }
}

const SEVERITY_BY_KIND: Record<string, Severity> = {
  node_down: "warning",
  healing_action: "warning",
  message_insecure: "warning",
  critical_alert: "critical",
};

export function severityOf(kind: string): Severity {
  return SEVERITY_BY_KIND[kind] ?? "info";
}

/** Human line for the event log; falls back to the raw payload fields. */
export function describeEvent(ev: ConsoleEvent): string {
  switch (ev.event) {
    case "node_registered":
      return `node ${ev.node_id} registered`;
    case "node_up":
      return `node ${ev.node_id} up`;
    case "node_down":
      return `node ${ev.node_id} stopped beating`;
    case "node_removed":
      return `node ${ev.node_id} removed`;
    case "tier_allocated":
      return `${ev.tier_type} ${ev.tier_id} allocated on ${ev.node_id}`;
    case "tier_deallocated":
      return `${ev.tier_type} ${ev.tier_id} deallocated from ${ev.node_id}`;
    case "tier_state":
      return `${ev.tier_id} -> ${ev.state}`;
    case "tier_standby":
      return `${ev.tier_id} standing by`;
    case "instance_state":
      return `instance ${ev.state}`;
    case "healing_action":
      return `healed ${ev.stage}: ${ev.promoted} replaces ${ev.replaced}`;
    case "critical_alert":
      return `ALERT ${ev.reason} (stage ${ev.stage}, lost ${ev.tier_id})`;
    default: {
      const extra = Object.entries(ev)
        .filter(([k]) => !["seq", "ts", "event"].includes(k))
        .map(([k, v]) => `${k}=${v}`)
        .join(" ");
      return extra ? `${ev.event} ${extra}` : ev.event;
    }
  }
}
