import { ConsoleState } from "./store.js";
import { ApiErrorBody, NodeInfo, TierInfo } from "./types.js";

export interface Selection {
  kind: "node" | "tier";
  id: string;
  nodeId: string;
}

/** Last failed action, kept verbatim for the operator to read. */
export interface ActionFailure {
  /** which action raised it; an older action finishing late must not clear it */
  actionId: number;
  body: ApiErrorBody;
  /** set when the same call can be retried with force */
  retryWithForce?: () => void;
}

export interface UiState {
  selected: Selection | null;
  failure: ActionFailure | null;
}

export interface Handlers {
  select(sel: Selection | null): void;
  startNode(nodeId: string): void;
  stopNode(nodeId: string): void;
  killNode(nodeId: string): void;
  allocate(nodeId: string, tierType: string): void;
  deallocate(tierId: string, force: boolean): void;
  dismissFailure(): void;
}

const TIER_TYPES = ["DGT", "DST", "DWT"];

function el(
  doc: Document,
  tag: string,
  className: string,
  text?: string,
): HTMLElement {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function button(doc: Document, label: string, onClick: () => void): HTMLElement {
  const b = el(doc, "button", "action", label);
  b.addEventListener("click", onClick);
  return b;
}

/**
 * Render the whole console into a fresh element. The caller swaps it in on
 * every store notification; state in equals DOM out, there is nothing else.
 */
export function renderApp(
  doc: Document,
  state: ConsoleState,
  ui: UiState,
  handlers: Handlers,
): HTMLElement {
  const root = el(doc, "div", "console");
  if (state.connection !== "live") {
    root.appendChild(
      el(
        doc,
        "div",
        "banner disconnected",
        state.connection === "connecting"
          ? "connecting to management service..."
          : "disconnected from management service, retrying",
      ),
    );
  }
  if (ui.failure) root.appendChild(renderFailure(doc, ui.failure, handlers));
  root.appendChild(renderCounters(doc, state));
  root.appendChild(renderTopology(doc, state, ui, handlers));
  if (ui.selected) {
    root.appendChild(renderActionPanel(doc, state, ui.selected, handlers));
  }
  root.appendChild(renderEventLog(doc, state));
  return root;
}

function renderCounters(doc: Document, state: ConsoleState): HTMLElement {
  const bar = el(doc, "div", "counters");
  for (const key of ["pending", "processing", "computed"]) {
    const card = el(doc, "span", `counter ${key}`);
    card.dataset.counter = key;
    card.appendChild(el(doc, "span", "label", key));
    card.appendChild(
      el(doc, "span", "value", String(state.demandCounts[key] ?? 0)),
    );
    bar.appendChild(card);
  }
  const instance = el(
    doc,
    "span",
    "counter instance",
    `instance ${state.topology?.instance ?? "unknown"}`,
  );
  bar.appendChild(instance);
  return bar;
}

export function renderTopology(
  doc: Document,
  state: ConsoleState,
  ui: UiState,
  handlers: Handlers,
): HTMLElement {
  const graph = el(doc, "div", "topology");
  if (!state.topology) {
    graph.appendChild(el(doc, "div", "empty", "no topology yet"));
    return graph;
  }
  for (const node of state.topology.nodes) {
    graph.appendChild(renderNode(doc, node, ui, handlers));
  }
  return graph;
}

function renderNode(
  doc: Document,
  node: NodeInfo,
  ui: UiState,
  handlers: Handlers,
): HTMLElement {
  const card = el(doc, "div", `node ${node.state}`);
  card.dataset.nodeId = node.node_id;
  if (ui.selected?.kind === "node" && ui.selected.id === node.node_id) {
    card.className += " selected";
  }
  const header = el(doc, "div", "node-header");
  header.appendChild(el(doc, "span", `dot ${node.state}`));
  header.appendChild(el(doc, "span", "node-id", node.node_id));
  header.appendChild(el(doc, "span", "node-state", node.state));
  header.addEventListener("click", () =>
    handlers.select({ kind: "node", id: node.node_id, nodeId: node.node_id }),
  );
  card.appendChild(header);

  const badges = el(doc, "div", "tiers");
  for (const tier of node.tiers) {
    badges.appendChild(renderTier(doc, node.node_id, tier, ui, handlers));
  }
  card.appendChild(badges);
  return card;
}

function renderTier(
  doc: Document,
  nodeId: string,
  tier: TierInfo,
  ui: UiState,
  handlers: Handlers,
): HTMLElement {
  // color comes from the state class: started green, allocated amber,
  // stopped gray (see index.html)
  const badge = el(doc, "span", `tier ${tier.state}`);
  badge.dataset.tierId = tier.tier_id;
  badge.dataset.state = tier.state;
  if (ui.selected?.kind === "tier" && ui.selected.id === tier.tier_id) {
    badge.className += " selected";
  }
  badge.appendChild(el(doc, "span", "tier-type", tier.tier_type));
  badge.appendChild(el(doc, "span", "tier-id", tier.tier_id));
  badge.addEventListener("click", () =>
    handlers.select({ kind: "tier", id: tier.tier_id, nodeId }),
  );
  return badge;
}

function renderActionPanel(
  doc: Document,
  state: ConsoleState,
  selected: Selection,
  handlers: Handlers,
): HTMLElement {
  const panel = el(doc, "div", "panel");
  panel.dataset.panelFor = selected.id;
  panel.appendChild(el(doc, "div", "panel-title", selected.id));
  const actions = el(doc, "div", "panel-actions");
  if (selected.kind === "node") {
    actions.appendChild(
      button(doc, "start", () => handlers.startNode(selected.id)),
    );
    actions.appendChild(
      button(doc, "stop", () => handlers.stopNode(selected.id)),
    );
    const kill = button(doc, "kill (fault)", () => {
      // destructive: ask first
      if (doc.defaultView?.confirm?.(`kill node ${selected.id}?`) === false)
        return;
      handlers.killNode(selected.id);
    });
    kill.className += " destructive";
    actions.appendChild(kill);
    for (const tierType of TIER_TYPES) {
      actions.appendChild(
        button(doc, `allocate ${tierType}`, () =>
          handlers.allocate(selected.id, tierType),
        ),
      );
    }
  } else {
    const dealloc = button(doc, "deallocate", () =>
      handlers.deallocate(selected.id, false),
    );
    dealloc.className += " destructive";
    dealloc.dataset.action = "deallocate";
    actions.appendChild(dealloc);
  }
  panel.appendChild(actions);
  return panel;
}

function renderFailure(
  doc: Document,
  failure: ActionFailure,
  handlers: Handlers,
): HTMLElement {
  const toast = el(doc, "div", "failure");
  // the server's words, not ours
  toast.appendChild(
    el(doc, "span", "failure-body", `${failure.body.code}: ${failure.body.error}`),
  );
  if (failure.retryWithForce) {
    const retry = button(doc, "force", failure.retryWithForce);
    retry.dataset.action = "force-retry";
    toast.appendChild(retry);
  }
  toast.appendChild(button(doc, "dismiss", () => handlers.dismissFailure()));
  return toast;
}

export function renderEventLog(doc: Document, state: ConsoleState): HTMLElement {
  const section = el(doc, "div", "event-log");
  section.appendChild(el(doc, "div", "log-title", "events"));
  const list = el(doc, "ul", "log-list");
  for (const entry of state.log.slice(-100).reverse()) {
    const row = el(doc, "li", `log-entry ${entry.severity}`);
    row.dataset.seq = String(entry.seq);
    row.dataset.kind = entry.kind;
    row.appendChild(el(doc, "span", `sev ${entry.severity}`, entry.severity));
    row.appendChild(el(doc, "span", "log-kind", entry.kind));
    row.appendChild(el(doc, "span", "log-detail", entry.detail));
    list.appendChild(row);
  }
  section.appendChild(list);
  return section;
}
