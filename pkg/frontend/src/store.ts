import { ManagementApi } from "./api.js";
import {
  ConnectionState,
  ConsoleEvent,
  LogEntry,
  TopologySnapshot,
  describeEvent,
  severityOf,
} from "./types.js";

const LOG_LIMIT = 500;

export interface ConsoleState {
  connection: ConnectionState;
  topology: TopologySnapshot | null;
  log: LogEntry[];
  demandCounts: Record<string, number>;
  lastSeq: number;
}

export type IngestResult = "applied" | "duplicate" | "resync";

/** The slice of the api client the store actually needs. */
export type SnapshotSource = Pick<ManagementApi, "events" | "topology">;

/**
 * Event-sourced view state. The topology starts from a GET /topology
 * snapshot and changes only when an event is ingested; nothing here is
 * written optimistically. A sequence gap means events were lost, so the
 * whole view re-syncs from a fresh snapshot.
 */
export class ConsoleStore {
  private state: ConsoleState = {
    connection: "connecting",
    topology: null,
    log: [],
    demandCounts: {},
    lastSeq: 0,
  };
  private listeners: Array<(state: ConsoleState) => void> = [];
  private resyncing: Promise<void> | null = null;

  constructor(private readonly api: SnapshotSource) {}

  getState(): ConsoleState {
    return this.state;
  }

  subscribe(listener: (state: ConsoleState) => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  /**
   * Establish (or re-establish) the baseline. Events are fetched first so
   * the snapshot, taken after, already reflects everything up to the
   * recorded sequence; later events re-apply idempotently.
   */
  async sync(): Promise<void> {
    const batch = await this.api.events(this.state.lastSeq);
    for (const ev of batch.events) this.appendLog(ev);
    const seqs = batch.events.map((e) => e.seq);
    this.state.lastSeq = Math.max(this.state.lastSeq, batch.latest, ...seqs, 0);
    this.state.topology = await this.api.topology();
    this.notify();
  }

  /** Feed one received event into the view. Returns what happened to it. */
  ingest(ev: ConsoleEvent): IngestResult {
    if (ev.seq <= this.state.lastSeq) return "duplicate";
    if (this.state.lastSeq > 0 && ev.seq > this.state.lastSeq + 1) {
      // lost events; the view can no longer be trusted, rebuild it
      this.resync();
      return "resync";
    }
    this.state.lastSeq = ev.seq;
    this.appendLog(ev);
    if (this.state.topology) this.reduce(this.state.topology, ev);
    this.notify();
    return "applied";
  }

  private resync(): void {
    if (this.resyncing) return;
    this.resyncing = this.sync()
      .catch(() => {
        this.setConnection("disconnected");
      })
      .finally(() => {
        this.resyncing = null;
      });
  }

  /** Test hook: resolves when any in-flight resync has settled. */
  async settled(): Promise<void> {
    await this.resyncing;
  }

  setConnection(connection: ConnectionState): void {
    if (this.state.connection === connection) return;
    this.state.connection = connection;
    this.notify();
  }

  setDemandCounts(counts: Record<string, number>): void {
    this.state.demandCounts = counts;
    this.notify();
  }

  private appendLog(ev: ConsoleEvent): void {
    this.state.log.push({
      seq: ev.seq,
      ts: ev.ts,
      kind: ev.event,
      severity: severityOf(ev.event),
      detail: describeEvent(ev),
    });
    if (this.state.log.length > LOG_LIMIT) {
      this.state.log = this.state.log.slice(-LOG_LIMIT);
    }
  }

  private reduce(topology: TopologySnapshot, ev: ConsoleEvent): void {
    const node = (id: string | undefined) =>
      topology.nodes.find((n) => n.node_id === id);
    switch (ev.event) {
      case "node_registered": {
        if (!node(ev.node_id)) {
          topology.nodes.push({
            node_id: ev.node_id!,
            state: "up",
            last_beat: null,
            tiers: [],
          });
          topology.nodes.sort((a, b) => a.node_id.localeCompare(b.node_id));
        }
        break;
      }
      case "node_up":
      case "node_down": {
        const n = node(ev.node_id);
        if (n) n.state = ev.event === "node_up" ? "up" : "down";
        break;
      }
      case "node_removed": {
        topology.nodes = topology.nodes.filter((n) => n.node_id !== ev.node_id);
        break;
      }
      case "tier_allocated": {
        const n = node(ev.node_id);
        if (n && !n.tiers.some((t) => t.tier_id === ev.tier_id)) {
          n.tiers.push({
            tier_id: ev.tier_id!,
            tier_type: ev.tier_type!,
            state: "allocated",
          });
          n.tiers.sort((a, b) => a.tier_id.localeCompare(b.tier_id));
        }
        break;
      }
      case "tier_deallocated": {
        for (const n of topology.nodes) {
          n.tiers = n.tiers.filter((t) => t.tier_id !== ev.tier_id);
        }
        break;
      }
      case "tier_state": {
        for (const n of topology.nodes) {
          const tier = n.tiers.find((t) => t.tier_id === ev.tier_id);
          if (tier) tier.state = ev.state!;
        }
        break;
      }
      case "instance_state": {
        topology.instance = ev.state!;
        break;
      }
      default:
        // healing_action, critical_alert, tier_standby, message_insecure:
        // log-only, no topology shape change of their own
        break;
    }
  }
}
