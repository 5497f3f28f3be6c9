import {
  ApiError,
  DemandCounts,
  EventBatch,
  TopologySnapshot,
} from "./types.js";

const REQUEST_TIMEOUT_MS = 3000;

async function request<T>(
  method: string,
  url: string,
  body?: unknown,
  attempt = 0,
): Promise<T> {
  // every call gets a deadline so a dead connection cannot freeze the
  // console. Reads are re-issued once; a mutation that timed out may still
  // have gone through, so it surfaces as a failure and the operator decides.
  const init: RequestInit = { method, signal: AbortSignal.timeout(REQUEST_TIMEOUT_MS) };
  if (body !== undefined) {
    init.headers = { "Content-Type": "application/json" };
    init.body = JSON.stringify(body);
  }
  try {
    const resp = await fetch(url, init);
    const text = await resp.text();
    const parsed = text ? JSON.parse(text) : {};
    if (!resp.ok) {
      throw new ApiError(resp.status, parsed);
    }
    return parsed as T;
  } catch (err) {
    if (err instanceof ApiError) throw err;
    if (method === "GET" && attempt < 1) {
      return request(method, url, body, attempt + 1);
    }
    throw err;
  }
}

/**
 * Thin client over the management endpoints. One method per route; no
 * state, no caching — the store owns all derived state.
 */
export class ManagementApi {
  constructor(public readonly baseUrl: string) {}

  topology(): Promise<TopologySnapshot> {
    return request("GET", `${this.baseUrl}/topology`);
  }

  events(since: number): Promise<EventBatch> {
    return request("GET", `${this.baseUrl}/events?since=${since}`);
  }

  demands(): Promise<DemandCounts> {
    return request("GET", `${this.baseUrl}/demands`);
  }

  registerNode(nodeId: string): Promise<{ node_id: string }> {
    return request("POST", `${this.baseUrl}/nodes`, { node_id: nodeId });
  }

  startNode(nodeId: string): Promise<unknown> {
    return request("POST", `${this.baseUrl}/nodes/${encodeURIComponent(nodeId)}/start`, {});
  }

  stopNode(nodeId: string): Promise<unknown> {
    return request("POST", `${this.baseUrl}/nodes/${encodeURIComponent(nodeId)}/stop`, {});
  }

  allocate(nodeId: string, tierType: string, count = 1): Promise<{ tier_ids: string[] }> {
    return request("POST", `${this.baseUrl}/tiers`, {
      node_id: nodeId,
      tier_type: tierType,
      count,
    });
  }

  deallocate(tierId: string, force = false): Promise<{ tier_id: string }> {
    const suffix = force ? "?force=1" : "";
    // tier ids contain slashes (n1/dwt3); encode each segment, keep the path shape
    const path = tierId.split("/").map(encodeURIComponent).join("/");
    return request("DELETE", `${this.baseUrl}/tiers/${path}${suffix}`);
  }

  injectFault(fault: Record<string, string>): Promise<unknown> {
    return request("POST", `${this.baseUrl}/faults`, fault);
  }

  saveNetwork(file: string): Promise<unknown> {
    return request("POST", `${this.baseUrl}/network/save`, { file });
  }

  loadNetwork(file: string): Promise<unknown> {
    return request("POST", `${this.baseUrl}/network/load`, { file });
  }
}
