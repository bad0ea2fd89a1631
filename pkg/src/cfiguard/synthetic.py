"""Seeded synthetic programs standing in for real applications.

A program is a driver function followed by ordinary functions laid out back
to back. Every block below is emitted so that it forms exactly one gadget.
The driver dispatches one ``call rax`` per function class and loops forever,
so a random walk over the program never runs dry. Functions carry a tag and a
class in their return gadget (``mov eax, tag; mov ecx, class; pop rbp; ret``),
and return sites re-check them (``cmp eax, tag`` after a direct call,
``cmp ecx, class`` after an indirect one).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
import logging
from pathlib import Path
import struct
from typing import Mapping

import numpy as np

from .errors import ConfigError, DataError
from .fingerprint import canonical_json

logger = logging.getLogger(__name__)

DEFAULT_BASE = 0x400000
GADGET_BUDGET = 16
MIN_BODY_BLOCKS = 3
MAX_BODY_BLOCKS = 8

_REL32 = struct.Struct("<i")
_IMM32 = struct.Struct("<I")

# (mnemonic, operands, bytes); every filler is at most three bytes.
FILLERS = (
    ("mov", "rbp, rsp", "4889e5"),
    ("add", "rax, rbx", "4801d8"),
    ("push", "rbx", "53"),
    ("pop", "rbx", "5b"),
    ("push", "r12", "4154"),
    ("pop", "r12", "415c"),
    ("inc", "rax", "48ffc0"),
    ("mov", "eax, ebx", "89d8"),
    ("add", "ebx, eax", "01c3"),
    ("xor", "esi, esi", "31f6"),
    ("test", "eax, eax", "85c0"),
    ("mov", "rdi, rax", "4889c7"),
)

BlockKey = tuple[int, int]


@dataclass
class _Op:
    mnemonic: str
    operands: str
    raw: bytes = b""
    # Relative branches carry their opcode here and a symbolic target.
    opcode: bytes = b""
    target: BlockKey | None = None

    @property
    def size(self) -> int:
        return len(self.opcode) + _REL32.size if self.target is not None else len(self.raw)


@dataclass
class _Block:
    key: BlockKey
    kind: str
    ops: list[_Op] = field(default_factory=list)
    # call_reg: class dispatched; call_imm: callee function; switch: case keys.
    dispatch_class: int = 0
    callee: int = 0
    cases: list[BlockKey] = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(op.size for op in self.ops)


@dataclass(frozen=True)
class SyntheticProgram:
    lines: tuple[str, ...]
    base: int
    entry: int
    indirect_targets: dict[int, tuple[int, ...]]
    gadget_count: int
    function_count: int
    class_count: int
    seed: int

    @property
    def entry_address(self) -> int:
        return self.base + self.entry

    def listing_text(self) -> str:
        header = (
            f"# synthetic program seed={self.seed} functions={self.function_count} "
            f"classes={self.class_count} gadgets={self.gadget_count}"
        )
        return "\n".join((header, *self.lines)) + "\n"

    def write_listing(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.listing_text(), encoding="utf-8")


def _imm32(value: int) -> bytes:
    return _IMM32.pack(value)


def _mov_imm(register: str, opcode: int, value: int) -> _Op:
    return _Op("mov", f"{register}, {value:#x}", bytes((opcode,)) + _imm32(value))


def _entry_header(function_class: int) -> list[_Op]:
    return [_Op("push", "rbp", b"\x55"), _mov_imm("ecx", 0xB9, function_class)]


def _direct_return_header(callee_tag: int) -> list[_Op]:
    return [_Op("cmp", f"eax, {callee_tag:#x}", b"\x3d" + _imm32(callee_tag))]


def _indirect_return_header(function_class: int) -> list[_Op]:
    return [_Op("cmp", f"ecx, {function_class:#x}", b"\x81\xf9" + _imm32(function_class))]


def _call_register(function_class: int) -> list[_Op]:
    return [_mov_imm("edx", 0xBA, function_class), _Op("call", "rax", b"\xff\xd0")]


class _ProgramBuilder:
    def __init__(self, seed: int, class_count: int):
        self.rng = np.random.default_rng([seed, 0x5E])
        self.class_count = class_count
        self.functions: list[list[_Block]] = []
        self.tags: list[int] = []
        self.classes: list[int] = []
        self.switch_counter = 0

    @property
    def gadget_count(self) -> int:
        return sum(len(blocks) for blocks in self.functions)

    def _fill(self, used: int) -> list[_Op]:
        wanted = int(self.rng.integers(0, 3))
        filler: list[_Op] = []
        for _ in range(wanted):
            mnemonic, operands, raw = FILLERS[int(self.rng.integers(len(FILLERS)))]
            op = _Op(mnemonic, operands, bytes.fromhex(raw))
            if used + op.size > GADGET_BUDGET:
                break
            filler.append(op)
            used += op.size
        return filler

    def add_driver(self) -> None:
        blocks: list[_Block] = []
        for index, function_class in enumerate(range(1, self.class_count + 1)):
            header = _entry_header(0) if index == 0 else _indirect_return_header(function_class - 1)
            blocks.append(_Block((0, index), "call_reg", header + _call_register(function_class), function_class))
        blocks.append(
            _Block(
                (0, len(blocks)),
                "jmp",
                _indirect_return_header(self.class_count) + [_Op("jmp", "", opcode=b"\xe9", target=(0, 0))],
            )
        )
        self.functions.append(blocks)
        self.tags.append(0)
        self.classes.append(0)

    def add_function(self) -> None:
        rng = self.rng
        number = len(self.functions)
        tag = (number - 1) % 255 + 1
        function_class = (number - 1) % self.class_count + 1
        body_count = int(rng.integers(MIN_BODY_BLOCKS, MAX_BODY_BLOCKS + 1))

        kinds = []
        for position in range(body_count):
            if position == body_count - 1:
                kinds.append("je" if rng.random() < 0.7 else "jmp")
                continue
            roll = rng.random()
            if roll < 0.30:
                kinds.append("je")
            elif roll < 0.40:
                kinds.append("jmp")
            elif roll < 0.60:
                kinds.append("call_imm" if number > 1 else "je")
            elif roll < 0.80:
                kinds.append("call_reg")
            else:
                kinds.append("switch")

        blocks: list[_Block] = []
        previous: _Block | None = None
        for kind in kinds:
            key = (number, len(blocks))
            if previous is None:
                header = _entry_header(function_class)
            elif previous.kind == "call_imm":
                header = _direct_return_header(self.tags[previous.callee])
            elif previous.kind == "call_reg":
                header = _indirect_return_header(previous.dispatch_class)
            else:
                header = []
            block = _Block(key, kind)

            if kind == "je":
                terminator = [_Op("je", "", opcode=b"\x0f\x84", target=key)]
            elif kind == "jmp":
                terminator = [_Op("jmp", "", opcode=b"\xe9", target=key)]
            elif kind == "call_imm":
                block.callee = int(rng.integers(1, number))
                terminator = [_Op("call", "", opcode=b"\xe8", target=(block.callee, 0))]
            elif kind == "call_reg":
                block.dispatch_class = int(rng.integers(1, self.class_count + 1))
                terminator = _call_register(block.dispatch_class)
            else:
                self.switch_counter += 1
                selector = (self.switch_counter - 1) % 255 + 1
                terminator = [
                    _Op("cmp", f"eax, {selector:#x}", bytes((0x83, 0xF8, selector))),
                    _Op("jmp", "rax", b"\xff\xe0"),
                ]

            used = sum(op.size for op in header) + sum(op.size for op in terminator)
            block.ops = header + self._fill(used) + terminator
            blocks.append(block)

            if kind == "switch":
                case_count = int(rng.integers(2, 5))
                join = (number, len(blocks) + case_count)
                for _ in range(case_count):
                    case_key = (number, len(blocks))
                    case_header = [_Op("mov", f"dl, {selector:#x}", bytes((0xB2, selector)))]
                    case_jump = [_Op("jmp", "", opcode=b"\xe9", target=join)]
                    used = sum(op.size for op in case_header + case_jump)
                    case = _Block(case_key, "case", case_header + self._fill(used) + case_jump)
                    blocks.append(case)
                    block.cases.append(case_key)
                previous = blocks[-1]
            else:
                previous = block

        ret_key = (number, len(blocks))
        blocks.append(
            _Block(
                ret_key,
                "ret",
                [
                    _mov_imm("eax", 0xB8, tag),
                    _mov_imm("ecx", 0xB9, function_class),
                    _Op("pop", "rbp", b"\x5d"),
                    _Op("ret", "", b"\xc3"),
                ],
            )
        )

        # Forward targets among non-case blocks keep direct paths acyclic.
        landing = [index for index, block in enumerate(blocks) if block.kind != "case"]
        for index, block in enumerate(blocks):
            if block.kind not in ("je", "jmp"):
                continue
            later = [position for position in landing if position > index]
            if block.kind == "jmp":
                later = later[:3]
            choice = later[int(rng.integers(len(later)))]
            block.ops[-1].target = (number, choice)

        self.functions.append(blocks)
        self.tags.append(tag)
        self.classes.append(function_class)


def generate_program(min_gadgets: int, seed: int, base: int = DEFAULT_BASE) -> SyntheticProgram:
    if min_gadgets < 1:
        raise ConfigError("min_gadgets must be at least 1")
    if base < 0 or base % 16:
        raise ConfigError("base must be a non-negative multiple of 16")

    class_count = max(1, min_gadgets // 64)
    builder = _ProgramBuilder(seed, class_count)
    builder.add_driver()
    while builder.gadget_count < min_gadgets or len(builder.functions) - 1 < class_count:
        builder.add_function()

    offsets: dict[BlockKey, int] = {}
    cursor = 0
    for blocks in builder.functions:
        for block in blocks:
            offsets[block.key] = cursor
            cursor += block.size

    lines: list[str] = []
    for blocks in builder.functions:
        for block in blocks:
            address = base + offsets[block.key]
            for op in block.ops:
                if op.target is not None:
                    target = base + offsets[op.target]
                    raw = op.opcode + _REL32.pack(target - (address + op.size))
                    operands = f"{target:#x}"
                else:
                    raw = op.raw
                    operands = op.operands
                record = {"addr": f"{address:#x}", "bytes": raw.hex(), "mn": op.mnemonic}
                if operands:
                    record["ops"] = operands
                lines.append(canonical_json(record))
                address += len(raw)

    entries_by_class: dict[int, list[int]] = defaultdict(list)
    for number, blocks in enumerate(builder.functions[1:], start=1):
        entries_by_class[builder.classes[number]].append(offsets[blocks[0].key])

    return_sites: dict[int, list[int]] = defaultdict(list)
    indirect_sites_by_class: dict[int, list[int]] = defaultdict(list)
    targets: dict[int, tuple[int, ...]] = {}
    for number, blocks in enumerate(builder.functions):
        for index, block in enumerate(blocks):
            if block.kind == "call_imm":
                return_sites[block.callee].append(offsets[(number, index + 1)])
            elif block.kind == "call_reg":
                targets[offsets[block.key]] = tuple(sorted(entries_by_class[block.dispatch_class]))
                if index + 1 < len(blocks):
                    indirect_sites_by_class[block.dispatch_class].append(offsets[(number, index + 1)])
            elif block.kind == "switch":
                targets[offsets[block.key]] = tuple(offsets[case] for case in block.cases)

    for number, blocks in enumerate(builder.functions[1:], start=1):
        sites = return_sites[number] + indirect_sites_by_class[builder.classes[number]]
        targets[offsets[blocks[-1].key]] = tuple(sorted(set(sites)))

    program = SyntheticProgram(
        lines=tuple(lines),
        base=base,
        entry=0,
        indirect_targets=dict(sorted(targets.items())),
        gadget_count=builder.gadget_count,
        function_count=len(builder.functions),
        class_count=class_count,
        seed=seed,
    )
    logger.info(
        "Synthetic program generated: functions=%s classes=%s gadgets=%s instructions=%s",
        program.function_count,
        class_count,
        program.gadget_count,
        len(lines),
    )
    return program


def write_truth(path: Path, targets: Mapping[int, tuple[int, ...]] | Mapping[int, list[int]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{source:#x} {target:#x}\n"
        for source in sorted(targets)
        for target in sorted(targets[source])
    ]
    path.write_text("".join(lines), encoding="utf-8")


def read_truth(path: Path) -> dict[int, tuple[int, ...]]:
    collected: dict[int, set[int]] = defaultdict(set)
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) != 2:
            raise DataError(f"Truth line {line_number}: expected 'src_offset dst_offset'")
        try:
            source, target = (int(part, 16) for part in parts)
        except ValueError as exc:
            raise DataError(f"Truth line {line_number}: {exc}") from exc
        collected[source].add(target)
    return {source: tuple(sorted(values)) for source, values in sorted(collected.items())}
