import { ConnectionState, ConsoleEvent } from "./types.js";

/**
 * Incremental server-sent-events parser. Frames arrive as
 * "id: <seq>\ndata: <json>\n\n"; comment lines (": keep-alive") are
 * heartbeats and carry nothing. Feed it decoded chunks, collect events.
 */
export class SseParser {
  private buffer = "";

  push(chunk: string): ConsoleEvent[] {
    this.buffer += chunk;
    const events: ConsoleEvent[] = [];
    let cut: number;
    while ((cut = this.buffer.indexOf("\n\n")) >= 0) {
      const frame = this.buffer.slice(0, cut);
      this.buffer = this.buffer.slice(cut + 2);
      const data = frame
        .split("\n")
        .filter((line) => line.startsWith("data:"))
        .map((line) => line.slice(5).trimStart())
        .join("\n");
      if (!data) continue; // keep-alive or id-only frame
      events.push(JSON.parse(data) as ConsoleEvent);
    }
    return events;
  }
}

export interface FeedCallbacks {
  onEvent: (ev: ConsoleEvent) => void;
  onStatus?: (state: ConnectionState) => void;
}

/**
 * Live event subscription with resume. Streams GET /events as SSE and
 * reconnects from the last seen sequence number after any drop; if the
 * server answers with plain JSON instead of a stream, degrades to polling
 * the same endpoint. Stop with close().
 */
export class EventFeed {
  lastSeq = 0;
  private closed = false;
  private controller: AbortController | null = null;
  private readonly retryMs: number;
  private readonly pollMs: number;

  constructor(
    private readonly baseUrl: string,
    private readonly callbacks: FeedCallbacks,
    opts: { retryMs?: number; pollMs?: number } = {},
  ) {
    this.retryMs = opts.retryMs ?? 1000;
    this.pollMs = opts.pollMs ?? 1000;
  }

  start(since = 0): void {
    this.lastSeq = since;
    void this.run();
  }

  close(): void {
    this.closed = true;
    this.controller?.abort();
  }

  private status(state: ConnectionState): void {
    this.callbacks.onStatus?.(state);
  }

  private deliver(events: ConsoleEvent[]): void {
    for (const ev of events) {
      if (ev.seq > this.lastSeq) this.lastSeq = ev.seq;
      this.callbacks.onEvent(ev);
    }
  }

  private async run(): Promise<void> {
    while (!this.closed) {
      this.controller = new AbortController();
      try {
        const resp = await fetch(`${this.baseUrl}/events?since=${this.lastSeq}`, {
          headers: { Accept: "text/event-stream" },
          signal: this.controller.signal,
        });
        const kind = resp.headers.get("content-type") ?? "";
        if (resp.ok && kind.includes("text/event-stream") && resp.body) {
          this.status("live");
          await this.consumeStream(resp.body);
        } else if (resp.ok) {
          // server spoke JSON: poll instead of stream
          this.status("live");
          const batch = (await resp.json()) as { events: ConsoleEvent[] };
          this.deliver(batch.events);
          await sleep(this.pollMs);
          continue;
        } else {
          // drain so the pooled connection is released before retrying
          await resp.body?.cancel();
        }
      } catch {
        // fall through to retry
      }
      if (this.closed) return;
      this.status("disconnected");
      await sleep(this.retryMs);
    }
  }

  private async consumeStream(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      this.deliver(parser.push(decoder.decode(value, { stream: true })));
    }
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
