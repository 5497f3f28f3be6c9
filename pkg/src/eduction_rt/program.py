"""Demand programs: declarative dataflow graphs evaluated eductively.

A program is a set of named nodes. Operator nodes combine the values of
other nodes; procedural nodes name a worker function that a worker tier
executes with the argument values the generator educes first. Programs are
data, registered at runtime, and written in a small text format:

    program <program-id> v1
    # comment and blank lines are ignored
    <ident> = <op>(<arg>, <arg>, ...) [@ <transform>]
    <ident> = const(<integer>)
    <ident> = dim(<dimension>)
    <ident> = proc <worker> [( <arg>, ... )] [@ <transform>]

    arg       := <ident> [@ <transform>]
    transform := <dim>+<int> | <dim>-<int> | <dim>=<int> | <dim>=$<ident>

A transform rewrites the evaluation context for one argument: shift the
named dimension, pin it to a literal, or pin it to the educed value of
another node (`=$`, the pointer form). A trailing transform after the
argument list is the default for every argument without its own.

Operators: `id` (pass-through), `eq`, `add`, `sub`, `mul` (two arguments),
`min` (one or more), and `if(cond, then, else)`, which is lazy: only the
selected branch is educed. `const` and `dim` take a literal and a dimension
name instead of node references. All values are signed 64-bit integers at
this layer; anything richer travels through procedural workers as bytes.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

FORMAT_VERSION = "v1"

# operator name -> (min arity, max arity or None for unbounded)
OPERATOR_ARITY = {
    "id": (1, 1),
    "eq": (2, 2),
    "add": (2, 2),
    "sub": (2, 2),
    "mul": (2, 2),
    "min": (1, None),
    "if": (3, 3),
}


class ProgramError(Exception):
    """Base class for demand-program errors."""


class ProgramSyntaxError(ProgramError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnresolvedReference(ProgramError):
    def __init__(self, identifier: str):
        super().__init__(f"reference to undefined identifier {identifier!r}")
        self.identifier = identifier


class ProgramConflict(ProgramError):
    def __init__(self, program_id: str):
        super().__init__(f"program {program_id!r} already registered with a different body")
        self.program_id = program_id


@dataclass(frozen=True)
class Transform:
    """Context rewrite for one argument lookup."""

    dim: str
    mode: str  # "shift" | "set" | "deref"
    amount: int = 0
    source: str = ""  # educed identifier for deref

    def render(self) -> str:
        if self.mode == "shift":
            return f"{self.dim}{self.amount:+d}"
        if self.mode == "set":
            return f"{self.dim}={self.amount}"
        return f"{self.dim}=${self.source}"


@dataclass(frozen=True)
class ArgSpec:
    identifier: str
    transform: Transform | None = None

    def render(self) -> str:
        if self.transform is None:
            return self.identifier
        return f"{self.identifier} @ {self.transform.render()}"


@dataclass(frozen=True)
class OperatorDef:
    op: str
    args: tuple[ArgSpec, ...] = ()
    literal: int | None = None  # const only
    dim_name: str | None = None  # dim only

    def render(self) -> str:
        if self.op == "const":
            return f"const({self.literal})"
        if self.op == "dim":
            return f"dim({self.dim_name})"
        return f"{self.op}({', '.join(a.render() for a in self.args)})"


@dataclass(frozen=True)
class ProceduralDef:
    worker: str
    args: tuple[ArgSpec, ...] = ()

    def render(self) -> str:
        if not self.args:
            return f"proc {self.worker}"
        return f"proc {self.worker} ({', '.join(a.render() for a in self.args)})"


@dataclass(frozen=True)
class DemandProgram:
    program_id: str
    nodes: dict[str, OperatorDef | ProceduralDef] = field(default_factory=dict)

    def validate(self) -> None:
        """Check that every reference, arity, and operator name resolves."""
        for name, node in self.nodes.items():
            for arg in node.args:
                if arg.identifier not in self.nodes:
                    raise UnresolvedReference(arg.identifier)
                t = arg.transform
                if t is not None and t.mode == "deref" and t.source not in self.nodes:
                    raise UnresolvedReference(t.source)
            if isinstance(node, OperatorDef) and node.op not in ("const", "dim"):
                lo, hi = OPERATOR_ARITY[node.op]
                n = len(node.args)
                if n < lo or (hi is not None and n > hi):
                    raise ProgramError(
                        f"{name}: operator {node.op!r} takes "
                        f"{lo if hi == lo else f'{lo}+'} arguments, got {n}"
                    )

    def body_digest(self) -> bytes:
        """Digest of the definitions, independent of stanza order."""
        lines = sorted(f"{name} = {node.render()}" for name, node in self.nodes.items())
        material = "\n".join([FORMAT_VERSION] + lines)
        return hashlib.sha256(material.encode("utf-8")).digest()


def apply_operator(op: str, values: list[int]) -> int:
    if op == "id":
        return values[0]
    if op == "eq":
        return 1 if values[0] == values[1] else 0
    if op == "add":
        return values[0] + values[1]
    if op == "sub":
        return values[0] - values[1]
    if op == "mul":
        return values[0] * values[1]
    if op == "min":
        return min(values)
    raise ProgramError(f"operator {op!r} has no direct application")


# -- text format --------------------------------------------------------------

_HEADER_RE = re.compile(r"^program\s+([\w.-]+)\s+(v\d+)$")
_STANZA_RE = re.compile(r"^(\w+)\s*=\s*(.+)$")
_PROC_RE = re.compile(r"^proc\s+([A-Za-z_][\w.]*)\s*(?:\((.*)\))?\s*(?:@\s*([^()]+))?$")
_OP_RE = re.compile(r"^(\w+)\s*\((.*)\)\s*(?:@\s*([^()]+))?$")
_ARG_RE = re.compile(r"^(\w+)(?:\s*@\s*(.+))?$")
_SHIFT_RE = re.compile(r"^(\w+)\s*([+-])\s*(\d+)$")
_SET_RE = re.compile(r"^(\w+)\s*=\s*(-?\d+)$")
_DEREF_RE = re.compile(r"^(\w+)\s*=\s*\$(\w+)$")


def _parse_transform(text: str, line_no: int) -> Transform:
    text = text.strip()
    m = _SHIFT_RE.match(text)
    if m:
        amount = int(m.group(3))
        return Transform(m.group(1), "shift", -amount if m.group(2) == "-" else amount)
    m = _DEREF_RE.match(text)
    if m:
        return Transform(m.group(1), "deref", source=m.group(2))
    m = _SET_RE.match(text)
    if m:
        return Transform(m.group(1), "set", int(m.group(2)))
    raise ProgramSyntaxError(line_no, f"bad context transform {text!r}")


def _parse_args(text: str | None, default: Transform | None, line_no: int) -> tuple[ArgSpec, ...]:
    if not text or not text.strip():
        return ()
    out = []
    for piece in text.split(","):
        m = _ARG_RE.match(piece.strip())
        if not m:
            raise ProgramSyntaxError(line_no, f"bad argument {piece.strip()!r}")
        transform = _parse_transform(m.group(2), line_no) if m.group(2) else default
        out.append(ArgSpec(m.group(1), transform))
    return tuple(out)


def parse_program(text: str) -> DemandProgram:
    program_id = None
    nodes: dict[str, OperatorDef | ProceduralDef] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if program_id is None:
            m = _HEADER_RE.match(line)
            if not m:
                raise ProgramSyntaxError(line_no, "expected `program <id> v1` header")
            if m.group(2) != FORMAT_VERSION:
                raise ProgramSyntaxError(line_no, f"unsupported format version {m.group(2)}")
            program_id = m.group(1)
            continue
        m = _STANZA_RE.match(line)
        if not m:
            raise ProgramSyntaxError(line_no, f"expected `<ident> = <definition>`, got {line!r}")
        name, rhs = m.group(1), m.group(2).strip()
        if name in nodes:
            raise ProgramSyntaxError(line_no, f"duplicate definition of {name!r}")
        nodes[name] = _parse_definition(rhs, line_no)
    if program_id is None:
        raise ProgramSyntaxError(0, "empty program text")
    program = DemandProgram(program_id, nodes)
    program.validate()
    return program


def _parse_definition(rhs: str, line_no: int) -> OperatorDef | ProceduralDef:
    if rhs.startswith("proc"):
        m = _PROC_RE.match(rhs)
        if not m:
            raise ProgramSyntaxError(line_no, f"bad procedural definition {rhs!r}")
        worker, arg_text, trailing = m.groups()
        default = _parse_transform(trailing, line_no) if trailing else None
        return ProceduralDef(worker, _parse_args(arg_text, default, line_no))
    m = _OP_RE.match(rhs)
    if not m:
        raise ProgramSyntaxError(line_no, f"bad definition {rhs!r}")
    op, arg_text, trailing = m.groups()
    if op == "const":
        try:
            return OperatorDef("const", literal=int(arg_text.strip()))
        except ValueError:
            raise ProgramSyntaxError(line_no, f"const needs an integer, got {arg_text!r}")
    if op == "dim":
        dim_name = arg_text.strip()
        if not dim_name.isidentifier():
            raise ProgramSyntaxError(line_no, f"dim needs a dimension name, got {arg_text!r}")
        return OperatorDef("dim", dim_name=dim_name)
    if op not in OPERATOR_ARITY:
        raise ProgramSyntaxError(line_no, f"unknown operator {op!r}")
    default = _parse_transform(trailing, line_no) if trailing else None
    return OperatorDef(op, _parse_args(arg_text, default, line_no))


def render_program(program: DemandProgram) -> str:
    lines = [f"program {program.program_id} {FORMAT_VERSION}", ""]
    lines += [f"{name} = {node.render()}" for name, node in program.nodes.items()]
    return "\n".join(lines) + "\n"


# -- the built-in eductive workload -------------------------------------------

# Regular numbers by the merge of the 2-, 3-, and 5-scaled copies of the
# output stream, one demand per (identifier, index), 1-based. The pointer
# nodes pa/pb/pc trail the output and advance whenever their candidate was
# the one taken at the previous index; the scaling itself is procedural, so
# worker tiers do the multiplying.
HAMMING_TEXT = """\
program hamming v1

one   = const(1)
two   = const(2)
idx   = dim(i)
base  = eq(idx, one)

ham   = if(base, one, best)
best  = min(c2, c3, c5)

c2 = proc scale2 (ham @ i=$pa)
c3 = proc scale3 (ham @ i=$pb)
c5 = proc scale5 (ham @ i=$pc)

start = eq(idx, two)
pa    = if(start, one, nexta)
pb    = if(start, one, nextb)
pc    = if(start, one, nextc)

# pointer advance: did this stream supply the previous output?
nexta = add(pa, hit2) @ i-1
nextb = add(pb, hit3) @ i-1
nextc = add(pc, hit5) @ i-1
hit2  = eq(c2, ham)
hit3  = eq(c3, ham)
hit5  = eq(c5, ham)
"""

HAMMING_PROGRAM = parse_program(HAMMING_TEXT)
