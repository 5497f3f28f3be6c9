import { ManagementApi } from "./api.js";
import { EventFeed } from "./events.js";
import { ConsoleStore } from "./store.js";
import { ActionFailure, Handlers, Selection, UiState, renderApp } from "./render.js";
import { ApiError } from "./types.js";

/**
 * Wires the pieces together: the api client, the event-sourced store, and
 * the renderer. Actions only POST; the view changes when the resulting
 * event comes back through the feed, so what the operator sees is what the
 * service confirmed.
 */
export class ConsoleApp {
  readonly store: ConsoleStore;
  readonly feed: EventFeed;
  private ui: UiState = { selected: null, failure: null };
  private demandTimer: ReturnType<typeof setInterval> | null = null;
  private actionSeq = 0;

  constructor(
    private readonly doc: Document,
    private readonly mount: HTMLElement,
    private readonly api: ManagementApi,
    opts: { retryMs?: number } = {},
  ) {
    this.store = new ConsoleStore(api);
    this.feed = new EventFeed(
      api.baseUrl,
      {
        onEvent: (ev) => this.store.ingest(ev),
        onStatus: (state) => this.store.setConnection(state),
      },
      opts,
    );
    this.store.subscribe(() => this.refresh());
  }

  async start(): Promise<void> {
    this.refresh();
    await this.store.sync();
    this.feed.start(this.store.getState().lastSeq);
    this.demandTimer = setInterval(() => void this.pollDemands(), 2000);
    void this.pollDemands();
  }

  stop(): void {
    this.feed.close();
    if (this.demandTimer) clearInterval(this.demandTimer);
  }

  private async pollDemands(): Promise<void> {
    try {
      const { counts } = await this.api.demands();
      this.store.setDemandCounts(counts);
    } catch {
      // the connection banner already covers an unreachable service
    }
  }

  /** Rebuild the DOM from current state; every view change goes through here. */
  refresh(): void {
    this.mount.replaceChildren(
      renderApp(this.doc, this.store.getState(), this.ui, this.handlers),
    );
  }

  private fail(actionId: number, err: unknown, retryWithForce?: () => void): void {
    if (err instanceof ApiError) {
      const failure: ActionFailure = { actionId, body: err.body };
      if (err.body.code === "LastRouteViolation" && retryWithForce) {
        failure.retryWithForce = retryWithForce;
      }
      this.ui.failure = failure;
    } else {
      this.ui.failure = {
        actionId,
        body: { code: "RequestFailed", error: String(err) },
      };
    }
    this.refresh();
  }

  private act(work: Promise<unknown>, retryWithForce?: () => void): void {
    const id = ++this.actionSeq;
    work
      .then(() => {
        // clear only failures from this or earlier actions: responses can
        // cross on the wire, and a slow success from a previous action must
        // not wipe the toast a newer action just raised
        if (this.ui.failure && this.ui.failure.actionId <= id) {
          this.ui.failure = null;
          this.refresh();
        }
      })
      .catch((err) => this.fail(id, err, retryWithForce));
  }

  readonly handlers: Handlers = {
    select: (sel: Selection | null) => {
      this.ui.selected = sel;
      this.refresh();
    },
    startNode: (nodeId) => this.act(this.api.startNode(nodeId)),
    stopNode: (nodeId) => this.act(this.api.stopNode(nodeId)),
    killNode: (nodeId) => this.act(this.api.injectFault({ kill_node: nodeId })),
    allocate: (nodeId, tierType) => this.act(this.api.allocate(nodeId, tierType)),
    deallocate: (tierId, force) =>
      this.act(this.api.deallocate(tierId, force), () =>
        this.handlers.deallocate(tierId, true),
      ),
    dismissFailure: () => {
      this.ui.failure = null;
      this.refresh();
    },
  };
}

function resolveBaseUrl(win: Window): string {
  const param = new URLSearchParams(win.location.search).get("api");
  if (param) return param.replace(/\/+$/, "");
  return win.location.origin;
}

export function boot(win: Window & typeof globalThis): ConsoleApp {
  const mount = win.document.getElementById("app");
  if (!mount) throw new Error("missing #app mount point");
  const api = new ManagementApi(resolveBaseUrl(win));
  const app = new ConsoleApp(win.document, mount, api);
  void app.start();
  return app;
}

// in a browser, start immediately; under tests this module is only imported
declare const window: (Window & typeof globalThis) | undefined;
if (typeof window !== "undefined" && window.document?.getElementById("app")) {
  boot(window);
}
