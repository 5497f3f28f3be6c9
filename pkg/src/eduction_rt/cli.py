"""The `eduction-rt` command.

`eduction-rt start GMT <file>` boots a whole instance in this process
from a properties file and serves the management API until SIGTERM.
Every other command is a thin HTTP client: it needs EDUCTION_CONFIG to
point at a properties file naming the running service, parses the
command line with the same grammar the service understands, and prints
the JSON answer.
"""

from __future__ import annotations

import json
import os
import signal
import sys
import threading
import urllib.error
import urllib.request

from .mgmt import (
    Allocate,
    Command,
    Configuration,
    Deallocate,
    LoadNetwork,
    MgmtError,
    ParseError,
    SaveNetwork,
    StartGmt,
    StartNode,
    Status,
    StopNode,
    load_config,
    load_network,
    parse_command,
)
from .pipeline import (
    DUMP_BINARY,
    PipelineConfig,
    empty_training_set,
    pipeline_worker_functions,
    restore,
)
from .program import HAMMING_TEXT
from .resilience import HealingSupervisor
from .runtime import GipsyRuntime
from .service import ManagementService

_USAGE = """\
usage: eduction-rt <command...>

  start GMT <file>                      boot an instance from a properties file
  start node <NodeID>                   register (if new) and start a node
  stop node <NodeID>                    stop a node's tiers
  allocate <NodeID> <TierType> <count>  add tiers (DGT, DST, DWT)
  deallocate <NodeID> <TierType> <TierID>...
  save network <file> | load network <file>
  status

Client commands find the service through EDUCTION_CONFIG, a properties
file with management.host and management.port (or management.url).
"""


class CliError(Exception):
    pass


# -- building a runtime from properties -----------------------------------------

_TRANSPORT_PREFIX = "gipsy.GEE.TA."


def runtime_from_config(config: Configuration) -> GipsyRuntime:
    """Assemble an instance the way a properties file describes it.

    Recognized keys besides the transport block:
      node.<id>.tiers = DST,DGT,DWT     initial topology, in file order
      gmt.beat_interval_ms = 250
      network.file = <path>             restore a saved network instead
      pipeline.format / pipeline.training  enable POST /pipeline/process
    """
    transport = {k: v for k, v in config.properties.items() if k.startswith(_TRANSPORT_PREFIX)}
    runtime = GipsyRuntime(
        transport or None,
        beat_interval_ms=config.get_int("gmt.beat_interval_ms", 250),
    )
    runtime.worker_functions.update(pipeline_worker_functions())
    runtime.register_program(HAMMING_TEXT)
    for key, value in config.properties.items():
        if key.startswith("node.") and key.endswith(".tiers"):
            node_id = key[len("node.") : -len(".tiers")]
            runtime.add_node(node_id)
            for tier_type in value.split(","):
                tier_type = tier_type.strip()
                if tier_type:
                    runtime.allocate(node_id, tier_type)
    return runtime


def pipeline_from_config(config: Configuration) -> PipelineConfig | None:
    fmt = config.lookup("pipeline.format")
    if fmt is None:
        return None
    training_file = config.lookup("pipeline.training")
    if training_file:
        mode = config.lookup("pipeline.training.mode", DUMP_BINARY)
        with open(training_file, "rb") as fh:
            training = restore(mode, fh)
    else:
        training = empty_training_set()
    return PipelineConfig(
        format=fmt,
        ops=(("normalize",),),
        extractors=(("energy", 8), ("min_max",)),
        training=training,
    )


def _serve(config_file: str, *, ready=None, stopper=None) -> int:
    config = load_config(config_file)
    runtime = runtime_from_config(config)
    plan = None
    network_file = config.lookup("network.file")
    if network_file:
        plan = load_network(runtime, network_file)
    if runtime.gmt.tiers():
        runtime.start()
    healing = HealingSupervisor(runtime, plan) if plan is not None else None
    service = ManagementService(
        runtime,
        config.lookup("management.host", "127.0.0.1"),
        config.get_int("management.port", 0),
        pipeline=pipeline_from_config(config),
        healing=healing,
    )
    stop = stopper if stopper is not None else threading.Event()
    try:
        # handlers must be live before the ready line goes out, or a fast
        # supervisor can SIGTERM into the gap and get the default exit
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        signal.signal(signal.SIGINT, lambda *_: stop.set())
    except ValueError:
        pass  # not the main thread; the caller owns the stopper
    service.start()
    print(f"management service listening at {service.url}", flush=True)
    if ready is not None:
        ready(service)
    try:
        stop.wait()
    finally:
        service.stop()
        runtime.stop()
    return 0


# -- client side -----------------------------------------------------------------

def _service_url() -> str:
    path = os.environ.get("EDUCTION_CONFIG")
    if not path:
        raise CliError(
            "set EDUCTION_CONFIG to a properties file naming the service "
            "(management.host and management.port, or management.url)"
        )
    config = load_config(path)
    url = config.lookup("management.url")
    if url:
        return url.rstrip("/")
    host = config.lookup("management.host", "127.0.0.1")
    port = config.get_int("management.port")
    if port is None:
        raise CliError(f"{path}: management.port is not set")
    return f"http://{host}:{port}"


def _http(method: str, url: str, body: dict | None = None) -> dict:
    data = json.dumps(body).encode("utf-8") if body is not None else None
    request = urllib.request.Request(url, data=data, method=method)
    if data is not None:
        request.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(request, timeout=30) as response:
            return json.loads(response.read() or b"{}")
    except urllib.error.HTTPError as exc:
        detail = exc.read()
        try:
            envelope = json.loads(detail)
            raise CliError(f"{envelope.get('code')}: {envelope.get('error')}") from None
        except (ValueError, KeyError):
            raise CliError(f"HTTP {exc.code}: {detail[:200]!r}") from None
    except urllib.error.URLError as exc:
        raise CliError(f"cannot reach {url}: {exc.reason}") from None


def dispatch_command(command: Command, base: str) -> dict:
    """Run one already-parsed command against a service."""
    if isinstance(command, Status):
        return _http("GET", f"{base}/topology")
    if isinstance(command, StartNode):
        try:
            return _http("POST", f"{base}/nodes/{command.node_id}/start")
        except CliError as exc:
            if not str(exc).startswith("UnknownNode"):
                raise
            # starting a node nobody registered yet is how one joins
            _http("POST", f"{base}/nodes", {"node_id": command.node_id})
            return _http("POST", f"{base}/nodes/{command.node_id}/start")
    if isinstance(command, StopNode):
        return _http("POST", f"{base}/nodes/{command.node_id}/stop")
    if isinstance(command, Allocate):
        return _http(
            "POST",
            f"{base}/tiers",
            {"node_id": command.node_id, "tier_type": command.tier_type, "count": command.count},
        )
    if isinstance(command, Deallocate):
        deallocated = []
        for tier_id in command.tier_ids:
            _http("DELETE", f"{base}/tiers/{tier_id}")
            deallocated.append(tier_id)
        return {"deallocated": deallocated}
    if isinstance(command, SaveNetwork):
        return _http("POST", f"{base}/network/save", {"file": command.file})
    if isinstance(command, LoadNetwork):
        return _http("POST", f"{base}/network/load", {"file": command.file})
    raise CliError(f"no dispatch for {command!r}")


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else list(argv)
    if not args or args[0] in ("-h", "--help", "help"):
        print(_USAGE, end="")
        return 0 if args else 2
    try:
        command = parse_command(" ".join(args))
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(_USAGE, end="", file=sys.stderr)
        return 2
    if isinstance(command, StartGmt):
        try:
            return _serve(command.config_file)
        except (MgmtError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    try:
        result = dispatch_command(command, _service_url())
    except (CliError, MgmtError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
