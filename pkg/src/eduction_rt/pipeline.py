"""Recognition pipeline: load, preprocess, extract features, classify.

The four stages are pure functions over bytes. Run locally they form the
plain in-process pipeline; registered as worker functions they become the
distributed one, each stage transition travelling as a procedural demand
through the store. Both paths produce identical result bytes, which is the
whole point: moving a stage to another node must not change the answer.

Also here: the training-set store (running per-class means), the XML network
config with its validator and forward pass, and the dump/restore codecs
(BINARY, GZIP_BINARY, CSV_TEXT; the remaining historical modes raise).
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import struct
import threading
import time
import wave
import io
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

from .runtime import (
    StoreClient,
    call_procedural,
    decode_error_value,
    value_data,
    value_is_error,
)


class PipelineError(Exception):
    """Base for recognition pipeline failures."""


class UnableToLoad(PipelineError):
    pass


class UnsupportedFormat(PipelineError):
    pass


class EmptyAfterSilenceRemoval(PipelineError):
    pass


class BadBand(PipelineError):
    pass


class BadFrameCount(PipelineError):
    pass


class DimensionMismatch(PipelineError):
    pass


class EmptyTrainingSet(PipelineError):
    pass


class BadNetworkDocument(PipelineError):
    """The XML is not a well-formed network description.

    Covers structural problems the config type cannot even represent, such
    as children other than <neuron> directly under a layer.
    """


class DanglingRef(PipelineError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"unresolved ref at {path}")


class DuplicateIndex(PipelineError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"duplicate index at {path}")


class MissingLayer(PipelineError):
    def __init__(self, layer_type: str):
        self.layer_type = layer_type
        super().__init__(f"network has no {layer_type} layer")


class NoFire(PipelineError):
    pass


class UnsupportedDumpMode(PipelineError):
    def __init__(self, mode: str):
        self.mode = mode
        super().__init__(f"Unsupported dump mode: {mode}")


class CorruptDump(PipelineError):
    pass


class ProcessingFailed(PipelineError):
    """A stage after loading reported a failure value."""

    def __init__(self, code: str, message: str):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}")


class SimulatedCrash(Exception):
    """Raised by the crash hook in tests; deliberately not a PipelineError."""


# -- domain types ----------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    sample_id: str
    values: tuple[float, ...]
    rate: int


@dataclass(frozen=True)
class FeatureVector:
    """Concatenated extractor outputs plus (extractor, start, length) spans."""

    components: tuple[float, ...]
    provenance: tuple[tuple[str, int, int], ...]


@dataclass(frozen=True)
class ClassStats:
    mean: tuple[float, ...]
    count: int


@dataclass(frozen=True)
class TrainingSet:
    dimension: int | None
    classes: Mapping[int, ClassStats]


def empty_training_set() -> TrainingSet:
    return TrainingSet(None, {})


@dataclass(frozen=True)
class Neuron:
    index: int
    thresh: float
    inputs: tuple[tuple[int, float], ...]
    outputs: tuple[int, ...]


@dataclass(frozen=True)
class Layer:
    type: str
    index: int
    neurons: tuple[Neuron, ...]


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple[Layer, ...]


@dataclass(frozen=True)
class ResultSet:
    """Classification outcome: (class_id, score) pairs ascending by score."""

    ranked: tuple[tuple[int, float], ...]
    tie_flag: bool


# -- loading ---------------------------------------------------------------------

RAW_F64 = "raw-f64"
WAV_PCM16 = "wav-pcm16"
RAW_RATE = 8000  # raw streams carry no header, so the rate is declared here


def load_sample(source: bytes, format: str) -> Sample:
    sample_id = hashlib.sha256(source).hexdigest()[:12]
    if format == RAW_F64:
        if len(source) % 8 != 0:
            raise UnableToLoad(f"raw-f64 stream of {len(source)} bytes is truncated")
        count = len(source) // 8
        values = struct.unpack(f"<{count}d", source)
        return Sample(sample_id, values, RAW_RATE)
    if format == WAV_PCM16:
        try:
            with wave.open(io.BytesIO(source), "rb") as wav:
                if wav.getsampwidth() != 2:
                    raise UnableToLoad(
                        f"expected 16-bit samples, got {8 * wav.getsampwidth()}-bit"
                    )
                channels = wav.getnchannels()
                rate = wav.getframerate()
                frames = wav.readframes(wav.getnframes())
        except UnableToLoad:
            raise
        except (wave.Error, EOFError, struct.error) as exc:
            raise UnableToLoad(str(exc)) from None
        raw = struct.unpack(f"<{len(frames) // 2}h", frames)
        if channels > 1:
            # mix down by averaging, frame by frame
            raw = tuple(
                sum(raw[i : i + channels]) / channels
                for i in range(0, len(raw) - channels + 1, channels)
            )
        return Sample(sample_id, tuple(v / 32768.0 for v in raw), rate)
    raise UnsupportedFormat(format)


# -- preprocessing ---------------------------------------------------------------

def preprocess(sample: Sample, ops: Sequence[tuple]) -> Sample:
    """Apply the ops in order; each is a tuple naming the op and its params."""
    values = sample.values
    for op in ops:
        name, params = op[0], tuple(op[1:])
        if name == "normalize":
            peak = max((abs(v) for v in values), default=0.0)
            if peak > 0.0:
                values = tuple(v / peak for v in values)
        elif name == "remove_silence":
            (threshold,) = params
            if threshold < 0:
                raise ValueError("silence threshold must be >= 0")
            kept = tuple(v for v in values if abs(v) >= threshold)
            if not kept:
                raise EmptyAfterSilenceRemoval(sample.sample_id)
            values = kept
        elif name == "remove_noise":
            (window,) = params
            values = _moving_average(values, int(window))
        elif name == "crop_audio":
            f_lo, f_hi = params
            values = _crop_band(values, sample.rate, float(f_lo), float(f_hi))
        else:
            raise ValueError(f"unknown preprocessing op {name!r}")
    return Sample(sample.sample_id, values, sample.rate)


def _moving_average(values: tuple[float, ...], window: int) -> tuple[float, ...]:
    if window < 1:
        raise ValueError("smoothing window must be >= 1")
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo : i + 1]) / (i + 1 - lo))
    return tuple(out)


def _fft(buf: list[complex], invert: bool) -> None:
    """In-place iterative radix-2 transform; len(buf) must be a power of two."""
    n = len(buf)
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j |= bit
        if i < j:
            buf[i], buf[j] = buf[j], buf[i]
    length = 2
    while length <= n:
        ang = (2.0 * math.pi / length) * (1.0 if invert else -1.0)
        wlen = complex(math.cos(ang), math.sin(ang))
        for start in range(0, n, length):
            w = 1.0 + 0.0j
            half = length // 2
            for k in range(start, start + half):
                u = buf[k]
                v = buf[k + half] * w
                buf[k] = u + v
                buf[k + half] = u - v
                w *= wlen
        length <<= 1
    if invert:
        for i in range(n):
            buf[i] /= n


def _crop_band(
    values: tuple[float, ...], rate: int, f_lo: float, f_hi: float
) -> tuple[float, ...]:
    if not (0.0 <= f_lo < f_hi <= rate / 2.0):
        raise BadBand(f"band [{f_lo}, {f_hi}] invalid for rate {rate}")
    if not values:
        return values
    n = 1
    while n < len(values):
        n <<= 1
    buf = [complex(v, 0.0) for v in values] + [0j] * (n - len(values))
    _fft(buf, invert=False)
    for k in range(n):
        freq = (k if k <= n // 2 else n - k) * rate / n
        if not (f_lo <= freq <= f_hi):
            buf[k] = 0j
    _fft(buf, invert=True)
    return tuple(buf[i].real for i in range(len(values)))


# -- feature extraction ----------------------------------------------------------

def extract_features(sample: Sample, extractors: Sequence[tuple]) -> FeatureVector:
    """Run every extractor on its own copy, concatenate in declared order.

    Extractors run on separate threads; completion order does not matter
    because each writes only its own slot.
    """
    if not extractors:
        raise ValueError("extractor list must not be empty")
    results: list[tuple[float, ...] | None] = [None] * len(extractors)
    failures: list[BaseException | None] = [None] * len(extractors)

    def run(slot: int, spec: tuple) -> None:
        copy = Sample(sample.sample_id, tuple(sample.values), sample.rate)
        try:
            results[slot] = _run_extractor(copy, spec)
        except BaseException as exc:
            failures[slot] = exc

    threads = [
        threading.Thread(target=run, args=(i, spec), daemon=True)
        for i, spec in enumerate(extractors)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in failures:
        if exc is not None:
            raise exc

    components: list[float] = []
    spans: list[tuple[str, int, int]] = []
    for spec, part in zip(extractors, results):
        assert part is not None
        spans.append((spec[0], len(components), len(part)))
        components.extend(part)
    return FeatureVector(tuple(components), tuple(spans))


def _run_extractor(sample: Sample, spec: tuple) -> tuple[float, ...]:
    name, params = spec[0], tuple(spec[1:])
    if name == "energy":
        (frames,) = params
        return tuple(sum(v * v for v in fr) for fr in _frames(sample.values, int(frames)))
    if name == "zero_crossings":
        (frames,) = params
        return tuple(
            float(sum(1 for a, b in zip(fr, fr[1:]) if a * b < 0))
            for fr in _frames(sample.values, int(frames))
        )
    if name == "min_max":
        if not sample.values:
            raise BadFrameCount("min_max over an empty sample")
        return (min(sample.values), max(sample.values))
    raise ValueError(f"unknown extractor {name!r}")


def _frames(values: tuple[float, ...], count: int) -> list[tuple[float, ...]]:
    if count < 1 or count > len(values):
        raise BadFrameCount(f"{count} frames over {len(values)} values")
    total = len(values)
    return [values[i * total // count : (i + 1) * total // count] for i in range(count)]


# -- training and distance classification -----------------------------------------

def train(ts: TrainingSet, class_id: int, fv: FeatureVector) -> TrainingSet:
    dim = len(fv.components)
    if dim == 0:
        raise DimensionMismatch("feature vector is empty")
    if ts.dimension is not None and ts.dimension != dim:
        raise DimensionMismatch(f"vector dimension {dim} != training set {ts.dimension}")
    stats = ts.classes.get(class_id)
    if stats is None:
        updated = ClassStats(tuple(fv.components), 1)
    else:
        n = stats.count
        updated = ClassStats(
            tuple((m * n + x) / (n + 1) for m, x in zip(stats.mean, fv.components)),
            n + 1,
        )
    classes = dict(ts.classes)
    classes[class_id] = updated
    return TrainingSet(dim, classes)


def classify_distance(fv: FeatureVector, ts: TrainingSet) -> ResultSet:
    if not ts.classes:
        raise EmptyTrainingSet("no trained classes")
    if ts.dimension != len(fv.components):
        raise DimensionMismatch(
            f"vector dimension {len(fv.components)} != training set {ts.dimension}"
        )
    scored = sorted(
        (math.sqrt(sum((x - m) ** 2 for x, m in zip(fv.components, st.mean))), cid)
        for cid, st in ts.classes.items()
    )
    ranked = tuple((cid, score) for score, cid in scored)
    tie = len(scored) > 1 and scored[0][0] == scored[1][0]
    return ResultSet(ranked, tie)


# -- network config: parse, validate, forward pass --------------------------------

LAYER_TYPES = ("input", "hidden", "output")

REFERENCE_NETWORK_XML = """<?xml version="1.0"?>
<net>
  <layer type="input" index="1">
    <neuron index="1" thresh="0.5">
      <output ref="1"/>
      <output ref="2"/>
      <output ref="3"/>
    </neuron>
    <neuron index="2" thresh="0.5">
      <output ref="1"/>
      <output ref="2"/>
      <output ref="3"/>
    </neuron>
    <neuron index="3" thresh="0.5">
      <output ref="1"/>
      <output ref="2"/>
      <output ref="3"/>
    </neuron>
  </layer>
  <layer type="hidden" index="2">
    <neuron index="1" thresh="0.5">
      <input ref="1" weight="0.42"/>
      <input ref="2" weight="0.42"/>
      <input ref="3" weight="0.42"/>
      <output ref="1"/>
    </neuron>
    <neuron index="2" thresh="0.5">
      <input ref="1" weight="0.42"/>
      <input ref="2" weight="0.42"/>
      <input ref="3" weight="0.42"/>
      <output ref="1"/>
    </neuron>
    <neuron index="3" thresh="0.5">
      <input ref="1" weight="0.42"/>
      <input ref="2" weight="0.42"/>
      <input ref="3" weight="0.42"/>
      <output ref="1"/>
    </neuron>
  </layer>
  <layer type="output" index="3">
    <neuron index="1" thresh="1.0">
      <input ref="1" weight="0.56"/>
      <input ref="2" weight="0.56"/>
      <input ref="3" weight="0.56"/>
    </neuron>
  </layer>
</net>
"""


def parse_network(document: str | bytes) -> NetworkConfig:
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise BadNetworkDocument(f"not well formed: {exc}") from None
    if root.tag != "net":
        raise BadNetworkDocument(f"root element is {root.tag!r}, expected 'net'")
    layers = []
    for layer_el in root:
        if layer_el.tag != "layer":
            raise BadNetworkDocument(f"net: unexpected child {layer_el.tag!r}")
        ltype = _attr(layer_el, "type", "net/layer")
        if ltype not in LAYER_TYPES:
            raise BadNetworkDocument(f"net/layer: unknown type {ltype!r}")
        lpath = f"net/layer[{ltype}]"
        lindex = _int_attr(layer_el, "index", lpath)
        neurons = []
        for el in layer_el:
            if el.tag != "neuron":
                # catches hand-written files that drop <output> at layer level
                raise BadNetworkDocument(f"{lpath}: unexpected child {el.tag!r}")
            npath = f"{lpath}/neuron"
            nindex = _int_attr(el, "index", npath)
            npath = f"{lpath}/neuron[{nindex}]"
            thresh = _float_attr(el, "thresh", npath)
            inputs = []
            outputs = []
            for sub in el:
                if sub.tag == "input":
                    ref = _int_attr(sub, "ref", f"{npath}/input")
                    weight = _float_attr(sub, "weight", f"{npath}/input[{ref}]")
                    inputs.append((ref, weight))
                elif sub.tag == "output":
                    outputs.append(_int_attr(sub, "ref", f"{npath}/output"))
                else:
                    raise BadNetworkDocument(f"{npath}: unexpected child {sub.tag!r}")
            neurons.append(Neuron(nindex, thresh, tuple(inputs), tuple(outputs)))
        layers.append(Layer(ltype, lindex, tuple(neurons)))
    return NetworkConfig(tuple(layers))


def _attr(el, name: str, path: str) -> str:
    value = el.get(name)
    if value is None:
        raise BadNetworkDocument(f"{path}: missing attribute {name!r}")
    return value


def _int_attr(el, name: str, path: str) -> int:
    try:
        return int(_attr(el, name, path))
    except ValueError:
        raise BadNetworkDocument(f"{path}: attribute {name!r} is not an integer") from None


def _float_attr(el, name: str, path: str) -> float:
    try:
        return float(_attr(el, name, path))
    except ValueError:
        raise BadNetworkDocument(f"{path}: attribute {name!r} is not a number") from None


def validate_network(cfg: NetworkConfig) -> None:
    """Check every structural invariant, naming the first violation's path."""
    types = [layer.type for layer in cfg.layers]
    for required in ("input", "output"):
        if required not in types:
            raise MissingLayer(required)
        if types.count(required) > 1:
            raise DuplicateIndex(f"net/layer[type={required}]")
    if types[0] != "input" or types[-1] != "output" or "hidden" in (types[0], types[-1]):
        raise BadNetworkDocument("layers must run input, hidden*, output in order")
    for mid in types[1:-1]:
        if mid != "hidden":
            raise BadNetworkDocument("layers must run input, hidden*, output in order")

    seen_layer = set()
    for layer in cfg.layers:
        if layer.index in seen_layer:
            raise DuplicateIndex(f"net/layer[index={layer.index}]")
        seen_layer.add(layer.index)
        seen_neuron = set()
        for neuron in layer.neurons:
            path = f"net/layer[{layer.type}]/neuron[{neuron.index}]"
            if neuron.index in seen_neuron:
                raise DuplicateIndex(path)
            seen_neuron.add(neuron.index)
            if not math.isfinite(neuron.thresh):
                raise BadNetworkDocument(f"{path}: thresh is not finite")
            for ref, weight in neuron.inputs:
                if not math.isfinite(weight):
                    raise BadNetworkDocument(f"{path}/input[{ref}]: weight is not finite")

    for pos, layer in enumerate(cfg.layers):
        before = {n.index for n in cfg.layers[pos - 1].neurons} if pos > 0 else set()
        after = (
            {n.index for n in cfg.layers[pos + 1].neurons}
            if pos + 1 < len(cfg.layers)
            else set()
        )
        for neuron in layer.neurons:
            path = f"net/layer[{layer.type}]/neuron[{neuron.index}]"
            for ref, _ in neuron.inputs:
                if ref not in before:
                    raise DanglingRef(f"{path}/input@ref={ref}")
            for ref in neuron.outputs:
                if ref not in after:
                    raise DanglingRef(f"{path}/output@ref={ref}")


def classify_network(fv: FeatureVector, cfg: NetworkConfig) -> int:
    """Forward pass with a hard threshold step at every neuron.

    Input neurons fire on their own component; the result is the index of
    the first firing output neuron in index order.
    """
    validate_network(cfg)
    input_neurons = sorted(cfg.layers[0].neurons, key=lambda n: n.index)
    if len(fv.components) != len(input_neurons):
        raise DimensionMismatch(
            f"vector dimension {len(fv.components)} != input layer {len(input_neurons)}"
        )
    acts = {
        n.index: 1.0 if x >= n.thresh else 0.0
        for x, n in zip(fv.components, input_neurons)
    }
    for layer in cfg.layers[1:]:
        acts = {
            n.index: 1.0
            if sum(w * acts[ref] for ref, w in n.inputs) >= n.thresh
            else 0.0
            for n in layer.neurons
        }
    for neuron in sorted(cfg.layers[-1].neurons, key=lambda n: n.index):
        if acts[neuron.index] == 1.0:
            return neuron.index
    raise NoFire("no output neuron fired")


# -- training set dump / restore ---------------------------------------------------

DUMP_BINARY = "BINARY"
DUMP_GZIP_BINARY = "GZIP_BINARY"
DUMP_CSV_TEXT = "CSV_TEXT"
DUMP_MODES = ("BINARY", "GZIP_BINARY", "CSV_TEXT", "XML", "HTML", "SQL")

_DUMP_VERSION = 0x01


def dump(ts: TrainingSet, mode: str, sink: BinaryIO) -> None:
    sink.write(dump_bytes(ts, mode))


def restore(mode: str, source: BinaryIO) -> TrainingSet:
    return restore_bytes(mode, source.read())


def dump_bytes(ts: TrainingSet, mode: str) -> bytes:
    if mode == DUMP_BINARY:
        return _encode_training_set(ts)
    if mode == DUMP_GZIP_BINARY:
        # mtime pinned so equal sets dump to equal bytes
        return gzip.compress(_encode_training_set(ts), mtime=0)
    if mode == DUMP_CSV_TEXT:
        return _encode_training_csv(ts)
    raise UnsupportedDumpMode(mode)


def restore_bytes(mode: str, data: bytes) -> TrainingSet:
    if mode == DUMP_BINARY:
        return _decode_training_set(data)
    if mode == DUMP_GZIP_BINARY:
        try:
            inner = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise CorruptDump(f"gzip layer: {exc}") from None
        return _decode_training_set(inner)
    if mode == DUMP_CSV_TEXT:
        return _decode_training_csv(data)
    raise UnsupportedDumpMode(mode)


def _encode_training_set(ts: TrainingSet) -> bytes:
    out = bytearray([_DUMP_VERSION])
    out += struct.pack(">I", 0 if ts.dimension is None else ts.dimension)
    out += struct.pack(">I", len(ts.classes))
    for cid in sorted(ts.classes):
        st = ts.classes[cid]
        out += struct.pack(">qQ", cid, st.count)
        out += struct.pack(f">{len(st.mean)}d", *st.mean)
    return bytes(out)


class _DumpReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptDump("truncated dump")
        piece = self.data[self.pos : self.pos + n]
        self.pos += n
        return piece

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CorruptDump(f"{len(self.data) - self.pos} trailing bytes")


def _decode_training_set(data: bytes) -> TrainingSet:
    r = _DumpReader(data)
    version = r.take(1)[0]
    if version != _DUMP_VERSION:
        raise CorruptDump(f"unknown dump version 0x{version:02x}")
    dimension = struct.unpack(">I", r.take(4))[0]
    count = struct.unpack(">I", r.take(4))[0]
    if count > 0 and dimension == 0:
        raise CorruptDump("classes present but dimension is zero")
    classes: dict[int, ClassStats] = {}
    for _ in range(count):
        cid, n = struct.unpack(">qQ", r.take(16))
        if cid in classes:
            raise CorruptDump(f"class {cid} appears twice")
        mean = struct.unpack(f">{dimension}d", r.take(8 * dimension))
        classes[cid] = ClassStats(mean, n)
    r.done()
    return TrainingSet(dimension if classes else None, classes)


def _encode_training_csv(ts: TrainingSet) -> bytes:
    dim = ts.dimension or 0
    header = ",".join(["class_id", "count"] + [f"c{i}" for i in range(dim)])
    lines = [header]
    for cid in sorted(ts.classes):
        st = ts.classes[cid]
        lines.append(",".join([str(cid), str(st.count)] + [f"{x:.17g}" for x in st.mean]))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_training_csv(data: bytes) -> TrainingSet:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptDump(f"not utf-8 text: {exc}") from None
    lines = [line for line in text.split("\n") if line]
    if not lines:
        raise CorruptDump("missing header row")
    cols = lines[0].split(",")
    dim = len(cols) - 2
    if dim < 0 or cols[:2] != ["class_id", "count"] or cols[2:] != [
        f"c{i}" for i in range(dim)
    ]:
        raise CorruptDump(f"bad header {lines[0]!r}")
    if dim == 0 and len(lines) > 1:
        raise CorruptDump("rows present but header names no components")
    classes: dict[int, ClassStats] = {}
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != dim + 2:
            raise CorruptDump(f"row has {len(cells)} cells, expected {dim + 2}")
        try:
            cid = int(cells[0])
            n = int(cells[1])
            mean = tuple(float(c) for c in cells[2:])
        except ValueError as exc:
            raise CorruptDump(str(exc)) from None
        if cid in classes:
            raise CorruptDump(f"class {cid} appears twice")
        classes[cid] = ClassStats(mean, n)
    return TrainingSet(dim if classes else None, classes)


# -- wire codecs for stage hand-off -------------------------------------------------

def sample_to_bytes(sample: Sample) -> bytes:
    sid = sample.sample_id.encode("utf-8")
    out = bytearray([0x01])
    out += struct.pack(">I", sample.rate)
    out += struct.pack(">I", len(sid)) + sid
    out += struct.pack(">I", len(sample.values))
    out += struct.pack(f">{len(sample.values)}d", *sample.values)
    return bytes(out)


def sample_from_bytes(data: bytes) -> Sample:
    r = _DumpReader(data)
    if r.take(1)[0] != 0x01:
        raise CorruptDump("unknown sample encoding version")
    rate = struct.unpack(">I", r.take(4))[0]
    sid = r.take(struct.unpack(">I", r.take(4))[0]).decode("utf-8")
    count = struct.unpack(">I", r.take(4))[0]
    values = struct.unpack(f">{count}d", r.take(8 * count))
    r.done()
    return Sample(sid, values, rate)


def feature_vector_to_bytes(fv: FeatureVector) -> bytes:
    out = bytearray([0x01])
    out += struct.pack(">I", len(fv.components))
    out += struct.pack(f">{len(fv.components)}d", *fv.components)
    out += struct.pack(">I", len(fv.provenance))
    for name, start, length in fv.provenance:
        blob = name.encode("utf-8")
        out += struct.pack(">I", len(blob)) + blob
        out += struct.pack(">II", start, length)
    return bytes(out)


def feature_vector_from_bytes(data: bytes) -> FeatureVector:
    r = _DumpReader(data)
    if r.take(1)[0] != 0x01:
        raise CorruptDump("unknown feature vector encoding version")
    count = struct.unpack(">I", r.take(4))[0]
    components = struct.unpack(f">{count}d", r.take(8 * count))
    spans = []
    for _ in range(struct.unpack(">I", r.take(4))[0]):
        name = r.take(struct.unpack(">I", r.take(4))[0]).decode("utf-8")
        start, length = struct.unpack(">II", r.take(8))
        spans.append((name, start, length))
    r.done()
    return FeatureVector(components, tuple(spans))


def result_set_to_bytes(rs: ResultSet) -> bytes:
    out = bytearray([0x01, 0x01 if rs.tie_flag else 0x00])
    out += struct.pack(">I", len(rs.ranked))
    for cid, score in rs.ranked:
        out += struct.pack(">qd", cid, score)
    return bytes(out)


def result_set_from_bytes(data: bytes) -> ResultSet:
    r = _DumpReader(data)
    if r.take(1)[0] != 0x01:
        raise CorruptDump("unknown result set encoding version")
    tie = r.take(1)[0] != 0
    ranked = []
    for _ in range(struct.unpack(">I", r.take(4))[0]):
        cid, score = struct.unpack(">qd", r.take(16))
        ranked.append((cid, score))
    r.done()
    return ResultSet(tuple(ranked), tie)


# -- stage worker functions ----------------------------------------------------------

LOAD_STAGE = "marf.load"
PREPROCESS_STAGE = "marf.preprocess"
EXTRACT_STAGE = "marf.extract"
CLASSIFY_STAGE = "marf.classify"
PIPELINE_STAGES = (LOAD_STAGE, PREPROCESS_STAGE, EXTRACT_STAGE, CLASSIFY_STAGE)


def _specs_to_json(specs: Sequence[tuple]) -> bytes:
    return json.dumps([list(s) for s in specs], separators=(",", ":")).encode("utf-8")


def _specs_from_json(blob: bytes) -> tuple[tuple, ...]:
    return tuple(tuple(s) for s in json.loads(blob.decode("utf-8")))


def stage_load(args: list[bytes]) -> bytes:
    fmt, source = args[0].decode("utf-8"), args[1]
    return sample_to_bytes(load_sample(source, fmt))


def stage_preprocess(args: list[bytes]) -> bytes:
    ops, sample = _specs_from_json(args[0]), sample_from_bytes(args[1])
    return sample_to_bytes(preprocess(sample, ops))


def stage_extract(args: list[bytes]) -> bytes:
    extractors, sample = _specs_from_json(args[0]), sample_from_bytes(args[1])
    return feature_vector_to_bytes(extract_features(sample, extractors))


def stage_classify(args: list[bytes]) -> bytes:
    ts, fv = restore_bytes(DUMP_BINARY, args[0]), feature_vector_from_bytes(args[1])
    return result_set_to_bytes(classify_distance(fv, ts))


def pipeline_worker_functions() -> dict[str, Callable[[list[bytes]], bytes]]:
    return {
        LOAD_STAGE: stage_load,
        PREPROCESS_STAGE: stage_preprocess,
        EXTRACT_STAGE: stage_extract,
        CLASSIFY_STAGE: stage_classify,
    }


# -- the client ----------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    format: str
    ops: tuple[tuple, ...]
    extractors: tuple[tuple, ...]
    training: TrainingSet


def run_local(config: PipelineConfig, source: bytes) -> ResultSet:
    """The plain in-process pipeline; what distribution must agree with."""
    sample = load_sample(source, config.format)
    sample = preprocess(sample, config.ops)
    fv = extract_features(sample, config.extractors)
    return classify_distance(fv, config.training)


class PipelineClient:
    """Drives a document through the four stages as procedural demands.

    Each stage result feeds the next stage's argument list, so repeated
    documents collapse onto warehouse hits stage by stage. An optional
    journal (begin(stage, digest) -> txn_id, commit(txn_id), recover())
    brackets every stage and the document as a whole; a document whose
    transaction never committed is re-run by `recover`, and the memoized
    stages make the replay converge on the same bytes.

    Deterministic failures (a stage returning an error value) commit their
    transactions before raising: re-running them would produce the same
    error. Timeouts and transport failures leave the transactions open.
    """

    def __init__(
        self,
        store: StoreClient,
        config: PipelineConfig,
        *,
        program_id: str = "marf",
        journal=None,
        timeout_ms: float = 30_000,
        poll_ms: int = 200,
    ):
        self.store = store
        self.agent = store.agent
        self.config = config
        self.program_id = program_id
        self.journal = journal
        self.timeout_ms = timeout_ms
        self.poll_ms = poll_ms
        self.client_id = f"pipe-{hashlib.sha256(str(id(self)).encode()).hexdigest()[:8]}"
        # test hook: raise SimulatedCrash after this stage commits (0 = right
        # after the document transaction opens)
        self.crash_after_stage: int | None = None

    def process_document(self, source: bytes) -> ResultSet:
        deadline = time.monotonic() + self.timeout_ms / 1000.0
        digest = hashlib.sha256(source).digest()
        doc_txn = self._begin("document", digest)
        if self.crash_after_stage == 0:
            raise SimulatedCrash("before any stage")

        ts_blob = dump_bytes(self.config.training, DUMP_BINARY)
        plan = [
            (LOAD_STAGE, [self.config.format.encode("utf-8"), source]),
            (PREPROCESS_STAGE, [_specs_to_json(self.config.ops), None]),
            (EXTRACT_STAGE, [_specs_to_json(self.config.extractors), None]),
            (CLASSIFY_STAGE, [ts_blob, None]),
        ]
        carried = None
        for number, (stage, args) in enumerate(plan, start=1):
            if args[-1] is None:
                args[-1] = carried
            txn = self._begin(stage, digest)
            tagged = call_procedural(
                self.agent,
                self.store,
                self.client_id,
                self.program_id,
                stage,
                args,
                deadline,
                poll_ms=self.poll_ms,
            )
            self._commit(txn)
            if value_is_error(tagged):
                self._commit(doc_txn)
                raise self._map_failure(number, tagged)
            carried = value_data(tagged)
            if self.crash_after_stage == number:
                raise SimulatedCrash(stage)
        self._commit(doc_txn)
        return result_set_from_bytes(carried)

    def recover(self, sources: Iterable[bytes]) -> dict[int, ResultSet]:
        """Re-run every document whose transaction never committed.

        `sources` is the corpus to match the journalled digests against;
        unknown digests are left alone. Returns results keyed by the old
        transaction id, which is committed once the replay lands.
        """
        if self.journal is None:
            raise ValueError("recover needs a journal")
        by_digest = {hashlib.sha256(s).digest(): s for s in sources}
        results: dict[int, ResultSet] = {}
        for record in self.journal.recover():
            if record.stage != "document":
                continue
            source = by_digest.get(record.payload_digest)
            if source is None:
                continue
            results[record.txn_id] = self.process_document(source)
            self.journal.commit(record.txn_id)
        return results

    def _begin(self, stage: str, digest: bytes):
        if self.journal is None:
            return None
        return self.journal.begin(stage, digest)

    def _commit(self, txn) -> None:
        if txn is not None:
            self.journal.commit(txn)

    @staticmethod
    def _map_failure(stage_number: int, tagged: bytes) -> PipelineError:
        code, message = decode_error_value(tagged)
        if stage_number == 1 and code == "UnableToLoad":
            return UnableToLoad(message)
        if stage_number == 1 and code == "UnsupportedFormat":
            return UnsupportedFormat(message)
        return ProcessingFailed(code, message)
