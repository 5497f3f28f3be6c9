import { describe, expect, it } from "vitest";

import { ConsoleStore, SnapshotSource } from "../src/store.js";
import { ConsoleEvent, NodeInfo, TopologySnapshot } from "../src/types.js";

/**
 * An in-memory stand-in for the management service: holds a topology,
 * mutates it through the same event kinds the real one emits, and serves
 * snapshot/event reads. Lets the tests check the convergence invariant
 * (replayed view == fresh snapshot) without a network.
 */
class ModelService {
  topologyState: TopologySnapshot = {
    instance: "started",
    beat_interval_ms: 250,
    nodes: [],
  };
  events: ConsoleEvent[] = [];

  emit(event: string, fields: Partial<ConsoleEvent> = {}): ConsoleEvent {
    const ev: ConsoleEvent = {
      seq: this.events.length + 1,
      ts: Date.now() / 1000,
      event,
      ...fields,
    };
    this.events.push(ev);
    this.applyToModel(ev);
    return ev;
  }

  private applyToModel(ev: ConsoleEvent): void {
    const t = this.topologyState;
    const node = t.nodes.find((n) => n.node_id === ev.node_id);
    if (ev.event === "node_registered") {
      t.nodes.push({ node_id: ev.node_id!, state: "up", last_beat: null, tiers: [] });
      t.nodes.sort((a, b) => a.node_id.localeCompare(b.node_id));
    } else if (ev.event === "node_down" && node) {
      node.state = "down";
    } else if (ev.event === "node_removed") {
      t.nodes = t.nodes.filter((n) => n.node_id !== ev.node_id);
    } else if (ev.event === "tier_allocated" && node) {
      node.tiers.push({ tier_id: ev.tier_id!, tier_type: ev.tier_type!, state: "allocated" });
      node.tiers.sort((a, b) => a.tier_id.localeCompare(b.tier_id));
    } else if (ev.event === "tier_deallocated") {
      for (const n of t.nodes) n.tiers = n.tiers.filter((x) => x.tier_id !== ev.tier_id);
    } else if (ev.event === "tier_state") {
      for (const n of t.nodes) {
        const tier = n.tiers.find((x) => x.tier_id === ev.tier_id);
        if (tier) tier.state = ev.state!;
      }
    }
  }

  api(): SnapshotSource {
    return {
      events: async (since: number) => ({
        events: this.events.filter((e) => e.seq > since),
        latest: this.events.length,
      }),
      topology: async () => structuredClone(this.topologyState),
    };
  }
}

function nodeIds(nodes: NodeInfo[]): string[] {
  return nodes.map((n) => n.node_id);
}

describe("ConsoleStore", () => {
  it("applies events in order on top of the snapshot", async () => {
    const svc = new ModelService();
    svc.emit("node_registered", { node_id: "a" });
    const store = new ConsoleStore(svc.api());
    await store.sync();

    store.ingest(svc.emit("node_registered", { node_id: "b" }));
    store.ingest(svc.emit("tier_allocated", { node_id: "b", tier_id: "b/dwt1", tier_type: "DWT" }));

    const topo = store.getState().topology!;
    expect(nodeIds(topo.nodes)).toEqual(["a", "b"]);
    expect(topo.nodes[1]!.tiers.map((t) => t.tier_id)).toEqual(["b/dwt1"]);
  });

  it("drops duplicates so the log stays strictly ordered", async () => {
    const svc = new ModelService();
    const store = new ConsoleStore(svc.api());
    await store.sync();

    const ev = svc.emit("node_registered", { node_id: "a" });
    expect(store.ingest(ev)).toBe("applied");
    expect(store.ingest(ev)).toBe("duplicate");
    expect(store.ingest({ ...ev })).toBe("duplicate");

    const seqs = store.getState().log.map((e) => e.seq);
    expect(new Set(seqs).size).toBe(seqs.length);
    expect(seqs).toEqual([...seqs].sort((x, y) => x - y));
  });

  it("re-syncs from a fresh snapshot on a sequence gap", async () => {
    const svc = new ModelService();
    svc.emit("node_registered", { node_id: "a" });
    const store = new ConsoleStore(svc.api());
    await store.sync();

    // events 2 and 3 happen but never reach the store
    svc.emit("node_registered", { node_id: "b" });
    svc.emit("tier_allocated", { node_id: "b", tier_id: "b/dwt1", tier_type: "DWT" });
    const late = svc.emit("node_registered", { node_id: "c" });

    expect(store.ingest(late)).toBe("resync");
    await store.settled();

    const topo = store.getState().topology!;
    expect(nodeIds(topo.nodes)).toEqual(["a", "b", "c"]);
    expect(store.getState().lastSeq).toBe(4);
  });

  it("converges to the model after an arbitrary event burst", async () => {
    const svc = new ModelService();
    const store = new ConsoleStore(svc.api());
    await store.sync();

    store.ingest(svc.emit("node_registered", { node_id: "n1" }));
    store.ingest(svc.emit("node_registered", { node_id: "n2" }));
    store.ingest(svc.emit("tier_allocated", { node_id: "n1", tier_id: "n1/dst1", tier_type: "DST" }));
    store.ingest(svc.emit("tier_allocated", { node_id: "n2", tier_id: "n2/dwt2", tier_type: "DWT" }));
    store.ingest(svc.emit("tier_state", { tier_id: "n2/dwt2", tier_type: "DWT", state: "started" }));
    store.ingest(svc.emit("node_down", { node_id: "n1" }));
    store.ingest(svc.emit("tier_deallocated", { node_id: "n1", tier_id: "n1/dst1", tier_type: "DST" }));

    const fresh = await svc.api().topology();
    expect(store.getState().topology).toEqual(fresh);
  });

  it("tags severities for the log view", async () => {
    const svc = new ModelService();
    const store = new ConsoleStore(svc.api());
    await store.sync();

    store.ingest(svc.emit("node_registered", { node_id: "a" }));
    store.ingest(svc.emit("node_down", { node_id: "a" }));
    store.ingest(svc.emit("healing_action", { stage: "work", promoted: "x", replaced: "y" }));
    store.ingest(svc.emit("critical_alert", { reason: "no_standby_available", stage: "work" }));

    const bySev = store.getState().log.map((e) => e.severity);
    expect(bySev).toEqual(["info", "warning", "warning", "critical"]);
  });
});
