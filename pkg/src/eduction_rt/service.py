"""The management API: a small HTTP+JSON face over one running instance.

Every state-changing endpoint does exactly what the corresponding
operator command does, through the same runtime calls, so driving the
instance over HTTP or over the CLI ends in the same topology. Events
stream as server-sent events with a `since=` resume cursor; clients that
cannot hold a stream poll the same URL for plain JSON.

There is no authentication: the service binds loopback by default and
trusts its operator, which is the deployment this targets. Browser
clients get permissive CORS headers for the same reason.
"""

from __future__ import annotations

import base64
import json
import re
import threading
import queue as queues
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlparse

from .mgmt import InvalidNetworkFile, MgmtError, load_network, save_network
from .pipeline import PipelineClient, PipelineConfig, PipelineError
from .program import ProgramError
from .resilience import HealingSupervisor
from .runtime import (
    DuplicateNodeId,
    GipsyRuntime,
    LastRouteViolation,
    TierError,
    Timeout,
    UnknownNode,
    UnknownTier,
    UnknownTierType,
)
from .transport import AllBrokersDown, TransportError

DEMAND_STATES = ("pending", "processing", "computed")


class BindFailure(MgmtError):
    def __init__(self, address: str, reason: Exception):
        super().__init__(f"cannot bind {address}: {reason}")
        self.address = address


_STATUS_BY_TYPE = {
    UnknownNode: 404,
    UnknownTier: 404,
    DuplicateNodeId: 409,
    LastRouteViolation: 409,
    UnknownTierType: 400,
    InvalidNetworkFile: 422,
    ProgramError: 422,
    PipelineError: 422,
    Timeout: 504,
    AllBrokersDown: 503,
    TransportError: 503,
    ValueError: 400,
}


def _status_for(exc: Exception) -> int:
    for cls, status in _STATUS_BY_TYPE.items():
        if isinstance(exc, cls):
            return status
    return 500


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, handler, service: "ManagementService"):
        self.service = service
        super().__init__(address, handler)


class ManagementService:
    """Serve the management endpoints for one runtime."""

    def __init__(
        self,
        runtime: GipsyRuntime,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        pipeline: PipelineConfig | None = None,
        healing: HealingSupervisor | None = None,
    ):
        self.runtime = runtime
        self.pipeline = pipeline
        self.healing = healing
        self._mutate = threading.Lock()
        self._lazy = threading.Lock()
        self._store_client = None
        self._pipeline_client: PipelineClient | None = None
        self._closing = threading.Event()
        self._thread: threading.Thread | None = None
        try:
            self._httpd = _Server((host, port), _Handler, self)
        except OSError as exc:
            raise BindFailure(f"{host}:{port}", exc) from None
        self.host = self._httpd.server_address[0]
        self.port = self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "ManagementService":
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="mgmt-http", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._closing.set()
        self._httpd.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        self._httpd.server_close()

    def __enter__(self) -> "ManagementService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # lazy clients: the store may not be up when the service starts
    def store_client(self):
        with self._lazy:
            if self._store_client is None:
                self._store_client = self.runtime.new_client()
            return self._store_client

    def pipeline_client(self) -> PipelineClient:
        if self.pipeline is None:
            raise PipelineError("no pipeline is configured on this service")
        with self._lazy:
            if self._pipeline_client is None:
                self._pipeline_client = PipelineClient(self.runtime.new_client(), self.pipeline)
            return self._pipeline_client


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def service(self) -> ManagementService:
        return self.server.service

    @property
    def runtime(self) -> GipsyRuntime:
        return self.server.service.runtime

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass

    # -- plumbing ----------------------------------------------------------

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _send_error(self, exc: Exception) -> None:
        self._send_json(_status_for(exc), {"code": type(exc).__name__, "error": str(exc)})

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        data = json.loads(raw)
        if not isinstance(data, dict):
            raise ValueError("request body must be a JSON object")
        return data

    def _route(self, handlers) -> None:
        url = urlparse(self.path)
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        for pattern, fn in handlers:
            m = re.fullmatch(pattern, url.path)
            if m:
                try:
                    fn(query, *[unquote(g) for g in m.groups()])
                except Exception as exc:  # typed envelope, never a stack dump
                    self._send_error(exc)
                return
        self._send_json(404, {"code": "NoSuchRoute", "error": self.path})

    # -- GET ---------------------------------------------------------------

    def do_GET(self) -> None:
        self._route(
            [
                (r"/topology", self._get_topology),
                (r"/demands", self._get_demands),
                (r"/events", self._get_events),
            ]
        )

    def _get_topology(self, query) -> None:
        self._send_json(200, self.runtime.gmt.topology())

    def _get_demands(self, query) -> None:
        state = query.get("state")
        if state is not None and state not in DEMAND_STATES:
            raise ValueError(f"state must be one of {', '.join(DEMAND_STATES)}")
        client = self.service.store_client()
        self._send_json(200, {"counts": client.counts(), "entries": client.entries(state)})

    def _get_events(self, query) -> None:
        since = int(query.get("since", 0))
        accept = self.headers.get("Accept", "")
        if "text/event-stream" not in accept:
            events = self.runtime.gmt.events_since(since)
            latest = events[-1]["seq"] if events else since
            self._send_json(200, {"events": events, "latest": latest})
            return
        self._stream_events(since)

    def _stream_events(self, since: int) -> None:
        gmt = self.runtime.gmt
        feed: queues.Queue = queues.Queue()
        gmt.add_listener(feed.put)
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            last = since
            for event in gmt.events_since(since):
                self._write_event(event)
                last = event["seq"]
            while not self.service._closing.is_set():
                try:
                    event = feed.get(timeout=1.0)
                except queues.Empty:
                    self.wfile.write(b": keep-alive\n\n")
                    self.wfile.flush()
                    continue
                if event["seq"] <= last:
                    continue  # already replayed from the ring
                self._write_event(event)
                last = event["seq"]
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass  # client went away; nothing to clean but the listener
        finally:
            gmt.remove_listener(feed.put)

    def _write_event(self, event: dict) -> None:
        frame = f"id: {event['seq']}\ndata: {json.dumps(event)}\n\n"
        self.wfile.write(frame.encode("utf-8"))
        self.wfile.flush()

    # -- POST ---------------------------------------------------------------

    def do_POST(self) -> None:
        self._route(
            [
                (r"/nodes", self._post_nodes),
                (r"/nodes/([^/]+)/start", self._post_node_start),
                (r"/nodes/([^/]+)/stop", self._post_node_stop),
                (r"/tiers", self._post_tiers),
                (r"/network/save", self._post_save),
                (r"/network/load", self._post_load),
                (r"/faults", self._post_faults),
                (r"/pipeline/process", self._post_process),
            ]
        )

    def _post_nodes(self, query) -> None:
        body = self._body()
        with self.service._mutate:
            node_id = self.runtime.add_node(body.get("node_id"))
        self._send_json(201, {"node_id": node_id})

    def _post_node_start(self, query, node_id: str) -> None:
        with self.service._mutate:
            self.runtime.start_node(node_id)
        self._send_json(200, {"node_id": node_id, "state": "up"})

    def _post_node_stop(self, query, node_id: str) -> None:
        with self.service._mutate:
            self.runtime.stop_node(node_id)
        self._send_json(200, {"node_id": node_id, "state": "stopping"})

    def _post_tiers(self, query) -> None:
        body = self._body()
        node_id = body.get("node_id")
        tier_type = body.get("tier_type")
        count = body.get("count", 1)
        if not isinstance(node_id, str) or not isinstance(tier_type, str):
            raise ValueError("node_id and tier_type are required")
        if not isinstance(count, int) or count < 1:
            raise ValueError("count must be a positive integer")
        with self.service._mutate:
            tier_ids = [self.runtime.allocate(node_id, tier_type) for _ in range(count)]
        self._send_json(201, {"tier_ids": tier_ids})

    def _delete_tier(self, query, tier_id: str) -> None:
        force = query.get("force") in ("1", "true")
        with self.service._mutate:
            tier = self.runtime.gmt.find_tier(tier_id)
            self.runtime.deallocate(tier.node_id, tier.tier_type, [tier_id], force=force)
        self._send_json(200, {"tier_id": tier_id, "deallocated": True})

    def _post_save(self, query) -> None:
        body = self._body()
        file = body.get("file")
        if not isinstance(file, str) or not file:
            raise ValueError("file is required")
        plan = self.service.healing.plan if self.service.healing else None
        with self.service._mutate:
            snapshot = save_network(self.runtime, file, plan)
        self._send_json(
            200,
            {"file": file, "nodes": len(snapshot["nodes"]), "tiers": len(snapshot["tiers"])},
        )

    def _post_load(self, query) -> None:
        body = self._body()
        file = body.get("file")
        if not isinstance(file, str) or not file:
            raise ValueError("file is required")
        with self.service._mutate:
            plan = load_network(self.runtime, file)
            if plan is not None and self.service.healing is not None:
                self.service.healing.plan = plan
        self._send_json(200, {"file": file, "instance": "stopped"})

    def _post_faults(self, query) -> None:
        body = self._body()
        with self.service._mutate:
            if "kill_node" in body:
                self.runtime.kill_node(body["kill_node"])
                self._send_json(200, {"killed": {"node": body["kill_node"]}})
            elif "kill_worker" in body:
                self.runtime.kill_worker(body["kill_worker"])
                self._send_json(200, {"killed": {"worker": body["kill_worker"]}})
            elif "kill_broker" in body:
                self.runtime.kill_primary_broker()
                self._send_json(200, {"killed": {"broker": "primary"}})
            else:
                raise ValueError("expected kill_node, kill_worker, or kill_broker")

    def _post_process(self, query) -> None:
        body = self._body()
        encoded = body.get("source")
        if not isinstance(encoded, str):
            raise ValueError("source must be base64 text")
        try:
            source = base64.b64decode(encoded, validate=True)
        except Exception:
            raise ValueError("source must be base64 text") from None
        result = self.service.pipeline_client().process_document(source)
        self._send_json(
            200, {"ranked": [[cid, score] for cid, score in result.ranked], "tie": result.tie_flag}
        )

    # -- DELETE --------------------------------------------------------------

    def do_DELETE(self) -> None:
        self._route([(r"/tiers/(.+)", self._delete_tier)])

    # -- OPTIONS -------------------------------------------------------------

    def do_OPTIONS(self) -> None:
        # preflight for browser clients served from another origin; the
        # service already trusts anyone who can reach it, so allow all
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()
