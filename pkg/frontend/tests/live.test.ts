import { ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { Window } from "happy-dom";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ManagementApi } from "../src/api.js";
import { ConsoleApp } from "../src/main.js";

// Boots the real management service (three nodes, one replica plan route
// with a standby) and drives the console against it: topology render,
// deallocation round trip, refused deallocation surfaced verbatim, a
// kill-node fault healing in order, and the disconnected banner.

const NETWORK_SCRIPT = `
import sys
from eduction_rt.mgmt import save_network
from eduction_rt.resilience import ReplicaPlan, StageRoutes
from eduction_rt.runtime import GipsyRuntime

rt = GipsyRuntime(None)
for node in ("alpha", "beta", "gamma"):
    rt.add_node(node)
rt.allocate("alpha", "DST", tier_id="alpha/dst1")
rt.allocate("alpha", "DGT", tier_id="alpha/dgt1")
rt.allocate("alpha", "DWT", tier_id="alpha/dwt1")
rt.allocate("beta", "DWT", tier_id="beta/dwt1")
rt.allocate("gamma", "DWT", tier_id="gamma/dwt1")
plan = ReplicaPlan({"work": StageRoutes({"beta/dwt1"}, ["gamma/dwt1"])})
save_network(rt, sys.argv[1], plan)
`;

let dir: string;
let proc: ChildProcess;
let baseUrl: string;
let app: ConsoleApp;
let mount: HTMLElement;

async function waitFor(check: () => boolean, timeoutMs = 10_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (!check()) {
    if (Date.now() > deadline) throw new Error("condition not reached in time");
    await new Promise((r) => setTimeout(r, 20));
  }
}

function startServer(config: string): Promise<string> {
  proc = spawn("python3", ["-m", "eduction_rt.cli", "start", "GMT", config], {
    stdio: ["ignore", "pipe", "pipe"],
  });
  return new Promise((resolve, reject) => {
    let out = "";
    const timer = setTimeout(() => reject(new Error(`no listen line in:\n${out}`)), 20_000);
    proc.stdout!.on("data", (chunk: Buffer) => {
      out += chunk.toString();
      const hit = out.match(/listening at (http:\/\/\S+)/);
      if (hit) {
        clearTimeout(timer);
        resolve(hit[1]!);
      }
    });
    proc.stderr!.on("data", (chunk: Buffer) => {
      out += chunk.toString();
    });
    proc.on("exit", (code) => reject(new Error(`server exited ${code}:\n${out}`)));
  });
}

beforeAll(async () => {
  dir = mkdtempSync(join(tmpdir(), "console-live-"));
  const netFile = join(dir, "network.json");
  execFileSync("python3", ["-c", NETWORK_SCRIPT, netFile]);
  const config = join(dir, "gmt.config");
  writeFileSync(
    config,
    [
      "gmt.beat_interval_ms = 150",
      "management.host = 127.0.0.1",
      "management.port = 0",
      `network.file = ${netFile}`,
      "",
    ].join("\n"),
  );
  baseUrl = await startServer(config);

  const win = new Window();
  (win as unknown as { confirm: () => boolean }).confirm = () => true;
  const doc = win.document as unknown as Document;
  mount = doc.createElement("div");
  doc.body.appendChild(mount);
  app = new ConsoleApp(doc, mount, new ManagementApi(baseUrl), { retryMs: 200 });
});

afterAll(() => {
  app?.stop();
  proc?.kill("SIGTERM");
  rmSync(dir, { recursive: true, force: true });
});

describe("console against a live instance", () => {
  it("renders the three-node topology within two seconds", async () => {
    const began = Date.now();
    await app.start();
    await waitFor(() => mount.querySelectorAll("[data-node-id]").length === 3, 2000);
    expect(Date.now() - began).toBeLessThan(2000);

    const ids = [...mount.querySelectorAll("[data-node-id]")].map(
      (el) => (el as HTMLElement).dataset.nodeId,
    );
    expect(ids).toEqual(["alpha", "beta", "gamma"]);
    // the instance was started by the boot, so every tier shows started
    const states = [...mount.querySelectorAll("[data-tier-id]")].map(
      (el) => (el as HTMLElement).dataset.state,
    );
    expect(states).toHaveLength(5);
    expect(new Set(states)).toEqual(new Set(["started"]));
  });

  let grown: string;

  it("shows a new tier badge once tier_allocated comes back", async () => {
    const before = mount.querySelectorAll("[data-tier-id]").length;
    app.handlers.allocate("alpha", "DWT");
    await waitFor(() => mount.querySelectorAll("[data-tier-id]").length === before + 1);

    const alpha = mount.querySelector('[data-node-id="alpha"]')!;
    const badges = [...alpha.querySelectorAll("[data-tier-id]")].map(
      (el) => (el as HTMLElement).dataset.tierId!,
    );
    grown = badges.find((id) => !["alpha/dst1", "alpha/dgt1", "alpha/dwt1"].includes(id))!;
    expect(grown).toBeTruthy();
  });

  it("round-trips a deallocation within one event cycle", async () => {
    expect(mount.querySelector(`[data-tier-id="${grown}"]`)).not.toBeNull();

    // the app re-renders inside ingest; by the time our subscriber sees the
    // deallocation event the badge must already be gone from the DOM
    let goneWhenApplied: boolean | null = null;
    const unsubscribe = app.store.subscribe((state) => {
      const applied = state.log.some(
        (e) => e.kind === "tier_deallocated" && e.detail.includes(grown),
      );
      if (applied && goneWhenApplied === null) {
        goneWhenApplied = mount.querySelector(`[data-tier-id="${grown}"]`) === null;
      }
    });

    const began = Date.now();
    app.handlers.deallocate(grown, false);
    await waitFor(() => goneWhenApplied !== null, 5000);
    unsubscribe();

    expect(goneWhenApplied).toBe(true);
    expect(Date.now() - began).toBeLessThan(2000);
  });

  it("surfaces a refused deallocation verbatim with a force affordance", async () => {
    app.handlers.deallocate("alpha/dst1", false);
    await waitFor(() => mount.querySelector(".failure-body") !== null);

    expect(mount.querySelector(".failure-body")!.textContent).toBe(
      "LastRouteViolation: would leave a started instance with no DST tier",
    );
    expect(mount.querySelector('[data-action="force-retry"]')).not.toBeNull();
    app.handlers.dismissFailure();
    expect(mount.querySelector(".failure-body")).toBeNull();
  });

  it("kill-node fault: node grays out, node_down precedes healing_action", async () => {
    app.handlers.killNode("beta");
    await waitFor(() => app.store.getState().log.some((e) => e.kind === "healing_action"));

    const log = app.store.getState().log;
    const down = log.find((e) => e.kind === "node_down" && e.detail.includes("beta"))!;
    const healed = log.find((e) => e.kind === "healing_action")!;
    expect(down.seq).toBeLessThan(healed.seq);
    expect(healed.detail).toContain("gamma/dwt1");
    expect(healed.severity).toBe("warning");

    const card = mount.querySelector('[data-node-id="beta"]')!;
    expect(card.className).toContain("down");
  });

  it("drops to the disconnected banner when the service goes away", async () => {
    proc.kill("SIGTERM");
    await waitFor(() => mount.querySelector(".banner.disconnected") !== null);
    // and keeps retrying rather than wedging
    await new Promise((r) => setTimeout(r, 500));
    expect(app.store.getState().connection).toBe("disconnected");
  });
});
