"""The tiny job language executed inside guests.

One instruction per line:

    cpu <ticks>            burn compute, honoring the guest execution cap
    alloc <bytes>          grow the job's live memory
    free <bytes>           release live memory (clamped at zero)
    write <disk> <bytes>   append to attached disk number <disk>
    emit <name> <bytes>    produce an output blob of deterministic content
    fail <message>         abort the guest with an error

Blank lines and `#` comments are ignored.  Programs are deterministic:
identical program text always yields identical traces, emissions, and disk
content, which is what makes server-side recompute validation possible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator

from .errors import WorkloadParseError

OPS = ("cpu", "alloc", "free", "write", "emit", "fail")


@dataclass(frozen=True)
class Instruction:
    op: str
    ticks: int = 0
    nbytes: int = 0
    disk_index: int = 0
    name: str = ""
    message: str = ""

    def render(self) -> str:
        if self.op == "cpu":
            return f"cpu {self.ticks}"
        if self.op in ("alloc", "free"):
            return f"{self.op} {self.nbytes}"
        if self.op == "write":
            return f"write {self.disk_index} {self.nbytes}"
        if self.op == "emit":
            return f"emit {self.name} {self.nbytes}"
        return f"fail {self.message}"


def _parse_count(token: str, line_no: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise WorkloadParseError(line_no, f"{what} must be an integer, got {token!r}")
    if value < 0:
        raise WorkloadParseError(line_no, f"{what} must be non-negative")
    return value


@dataclass(frozen=True)
class WorkloadProgram:
    instructions: tuple[Instruction, ...]
    source: str

    @classmethod
    def parse(cls, text: str) -> "WorkloadProgram":
        instructions = []
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            op, _, rest = line.partition(" ")
            rest = rest.strip()
            if op == "cpu":
                instructions.append(Instruction("cpu", ticks=_parse_count(rest, line_no, "ticks")))
            elif op in ("alloc", "free"):
                instructions.append(Instruction(op, nbytes=_parse_count(rest, line_no, "bytes")))
            elif op == "write":
                parts = rest.split()
                if len(parts) != 2:
                    raise WorkloadParseError(line_no, "write takes <disk_index> <bytes>")
                instructions.append(Instruction(
                    "write",
                    disk_index=_parse_count(parts[0], line_no, "disk_index"),
                    nbytes=_parse_count(parts[1], line_no, "bytes"),
                ))
            elif op == "emit":
                parts = rest.split()
                if len(parts) != 2:
                    raise WorkloadParseError(line_no, "emit takes <name> <bytes>")
                instructions.append(Instruction(
                    "emit", name=parts[0], nbytes=_parse_count(parts[1], line_no, "bytes")))
            elif op == "fail":
                if not rest:
                    raise WorkloadParseError(line_no, "fail takes a message")
                instructions.append(Instruction("fail", message=rest))
            else:
                raise WorkloadParseError(line_no, f"unknown instruction {op!r}")
        return cls(tuple(instructions), text)

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self) -> Iterator[Instruction]:
        return iter(self.instructions)

    def step_count(self, exec_cap_percent: int = 100) -> int:
        """Scheduler steps a full run takes: cpu work progresses by
        exec_cap_percent tick-hundredths per step, everything else is one step."""
        steps = 0
        for ins in self.instructions:
            if ins.op == "cpu":
                steps += -(-ins.ticks * 100 // exec_cap_percent)  # ceil div
            else:
                steps += 1
            if ins.op == "fail":
                break
        return steps


def fill_bytes(tag: str, n: int) -> bytes:
    """Deterministic pseudo-content: a SHA-256 keystream over `tag`.

    Used for emitted blobs and disk writes so that any re-execution of the
    same program (client, server recompute, direct executor) produces
    byte-identical data."""
    if n <= 0:
        return b""
    out = bytearray()
    counter = 0
    seed = tag.encode("utf-8")
    while len(out) < n:
        out.extend(hashlib.sha256(seed + counter.to_bytes(8, "little")).digest())
        counter += 1
    return bytes(out[:n])
