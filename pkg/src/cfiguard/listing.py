"""Instruction-listing ingestion and gadget segmentation.

The listing document is one JSON object per line::

    {"addr": "0x401000", "bytes": "4889e5", "mn": "mov", "ops": "rbp, rsp"}

Keys: ``addr`` (decimal int or ``0x`` string), ``bytes`` (even-length lowercase
hex), ``mn``, optional ``ops``, ``target`` (direct branches only) and
``section`` (default ``"text"``). Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging
import re
from typing import Any, Iterable, Sequence

from .errors import DataError
from .models import BranchKind, Gadget, Instruction

logger = logging.getLogger(__name__)

MAX_INSTRUCTION_BYTES = 15

_HEX_BYTES_RE = re.compile(r"^(?:[0-9a-f]{2})+$")
_IMMEDIATE_RE = re.compile(r"^\$?(?:0x[0-9a-f]+|[0-9]+)h?(?:\s*<[^>]*>)?$")
_PREFIXES = ("bnd", "notrack", "rep", "repz", "repe", "repnz", "repne", "lock", "data16")

RETURN_MNEMONICS = frozenset({"ret", "retq", "retl", "retw", "retn", "retf", "retfq", "iret", "iretq"})
CALL_MNEMONICS = frozenset({"call", "callq", "calll", "callw"})
JUMP_MNEMONICS = frozenset({"jmp", "jmpq", "jmpl", "jmpw"})
CONDITIONAL_MNEMONICS = frozenset(
    {
        "ja", "jae", "jb", "jbe", "jc", "jcxz", "je", "jecxz", "jg", "jge", "jl", "jle",
        "jna", "jnae", "jnb", "jnbe", "jnc", "jne", "jng", "jnge", "jnl", "jnle", "jno",
        "jnp", "jns", "jnz", "jo", "jp", "jpe", "jpo", "jrcxz", "js", "jz",
        "loop", "loope", "loopne", "loopnz", "loopz",
    }
)


class ListingError(DataError):
    pass


class MalformedLine(ListingError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"Malformed listing line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class NonMonotonicAddress(ListingError):
    def __init__(self, line_number: int, address: int, previous: int):
        super().__init__(
            f"Listing line {line_number}: address {address:#x} does not follow {previous:#x}"
        )
        self.line_number = line_number
        self.address = address
        self.previous = previous


class OverlongInstruction(ListingError):
    def __init__(self, line_number: int, length: int):
        super().__init__(
            f"Listing line {line_number}: instruction of {length} bytes exceeds {MAX_INSTRUCTION_BYTES}"
        )
        self.line_number = line_number
        self.length = length


class EmptyListing(ListingError):
    pass


@dataclass(frozen=True)
class Listing:
    instructions: tuple[Instruction, ...]
    # Indexes into ``instructions`` where a new contiguous section begins.
    section_starts: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def __getitem__(self, index: int) -> Instruction:
        return self.instructions[index]


@dataclass(frozen=True)
class Segmentation:
    gadgets: tuple[Gadget, ...]
    dropped_instructions: int
    section_count: int


def _strip_prefixes(mnemonic: str) -> str:
    parts = mnemonic.strip().lower().split()
    while len(parts) > 1 and parts[0] in _PREFIXES:
        parts = parts[1:]
    return parts[0] if parts else ""


def _is_immediate(operands: str) -> bool:
    return bool(_IMMEDIATE_RE.match(operands.strip().lower()))


def _parse_immediate(operands: str) -> int | None:
    text = operands.strip().lower().lstrip("$")
    text = text.split("<", 1)[0].strip().rstrip("h")
    try:
        return int(text, 0) if text.startswith("0x") else int(text, 10)
    except ValueError:
        return None


def classify_branch(mnemonic: str, operands: str = "", has_target: bool = False) -> BranchKind:
    mn = _strip_prefixes(mnemonic)
    ops = operands.strip()

    if mn in RETURN_MNEMONICS:
        return BranchKind.RETURN
    if mn in CONDITIONAL_MNEMONICS:
        return BranchKind.DIRECT_CONDITIONAL
    if mn in CALL_MNEMONICS or mn in JUMP_MNEMONICS:
        indirect_kind = BranchKind.INDIRECT_CALL if mn in CALL_MNEMONICS else BranchKind.INDIRECT_JUMP
        if not ops:
            return BranchKind.DIRECT_UNCONDITIONAL if has_target else BranchKind.NONE
        if _is_immediate(ops):
            return BranchKind.DIRECT_UNCONDITIONAL
        return indirect_kind
    return BranchKind.NONE


def _parse_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("boolean is not an address")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        text = value.strip().lower()
        return int(text, 16) if text.startswith("0x") else int(text, 10)
    raise ValueError(f"unsupported integer value {value!r}")


def _parse_line(line_number: int, text: str) -> Instruction:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedLine(line_number, f"invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise MalformedLine(line_number, "expected an object")

    for key in ("addr", "bytes", "mn"):
        if key not in record:
            raise MalformedLine(line_number, f"missing key {key!r}")

    try:
        address = _parse_int(record["addr"])
    except ValueError as exc:
        raise MalformedLine(line_number, f"bad address: {exc}") from exc
    if not 0 <= address < 1 << 64:
        raise MalformedLine(line_number, "address outside the 64-bit range")

    hex_bytes = record["bytes"]
    if not isinstance(hex_bytes, str) or not _HEX_BYTES_RE.match(hex_bytes):
        raise MalformedLine(line_number, f"bytes must be even-length lowercase hex, got {hex_bytes!r}")
    raw = bytes.fromhex(hex_bytes)
    if len(raw) > MAX_INSTRUCTION_BYTES:
        raise OverlongInstruction(line_number, len(raw))

    mnemonic = record["mn"]
    if not isinstance(mnemonic, str) or not mnemonic.strip():
        raise MalformedLine(line_number, "empty mnemonic")
    operands = record.get("ops") or ""
    if not isinstance(operands, str):
        raise MalformedLine(line_number, "ops must be text")
    section = record.get("section") or "text"

    explicit_target = record.get("target")
    branch = classify_branch(mnemonic, operands, has_target=explicit_target is not None)

    target: int | None = None
    if branch.is_direct:
        if explicit_target is not None:
            try:
                target = _parse_int(explicit_target)
            except ValueError as exc:
                raise MalformedLine(line_number, f"bad target: {exc}") from exc
        else:
            target = _parse_immediate(operands)
        if target is None:
            raise MalformedLine(line_number, "direct branch without a resolvable target")
    elif explicit_target is not None:
        raise MalformedLine(line_number, "target given for a non-direct instruction")

    return Instruction(
        address=address,
        raw=raw,
        mnemonic=mnemonic.strip(),
        branch=branch,
        target=target,
        operands=operands.strip(),
        section=str(section),
    )


def _section_starts(instructions: Sequence[Instruction]) -> tuple[int, ...]:
    starts: list[int] = []
    previous: Instruction | None = None
    for index, instruction in enumerate(instructions):
        if (
            previous is None
            or instruction.section != previous.section
            or instruction.address != previous.end
        ):
            starts.append(index)
        previous = instruction
    return tuple(starts)


def parse_listing(document: str | Iterable[str]) -> Listing:
    lines = document.splitlines() if isinstance(document, str) else document
    instructions: list[Instruction] = []

    for line_number, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        instruction = _parse_line(line_number, text)
        if instructions:
            previous = instructions[-1]
            if instruction.address <= previous.address:
                raise NonMonotonicAddress(line_number, instruction.address, previous.address)
            if instruction.address < previous.end:
                raise MalformedLine(
                    line_number,
                    f"instruction at {instruction.address:#x} overlaps the previous one ending at {previous.end:#x}",
                )
        instructions.append(instruction)

    listing = Listing(instructions=tuple(instructions), section_starts=_section_starts(instructions))
    logger.debug(
        "Parsed %s instructions in %s sections.", len(listing.instructions), len(listing.section_starts)
    )
    return listing


def segment_gadgets(instructions: Listing | Sequence[Instruction]) -> Segmentation:
    if isinstance(instructions, Listing):
        items = instructions.instructions
        starts = set(instructions.section_starts)
    else:
        items = tuple(instructions)
        starts = set(_section_starts(items))
    if not items:
        raise EmptyListing("Listing contains no instructions")

    gadgets: list[Gadget] = []
    dropped = 0
    pending: list[Instruction] = []

    for index, instruction in enumerate(items):
        if index in starts and pending:
            # Gadgets never span a section break.
            dropped += len(pending)
            pending = []
        pending.append(instruction)
        if instruction.branch.is_branch:
            gadgets.append(
                Gadget(
                    id=len(gadgets),
                    start=pending[0].address,
                    raw=b"".join(member.raw for member in pending),
                    terminator=instruction.branch,
                    direct_target=instruction.target,
                    instruction_count=len(pending),
                )
            )
            pending = []
    dropped += len(pending)

    if dropped:
        logger.info("Dropped %s trailing non-branch instructions at section ends.", dropped)
    return Segmentation(gadgets=tuple(gadgets), dropped_instructions=dropped, section_count=len(starts))
