from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Union


class BranchKind(str, Enum):
    NONE = "none"
    DIRECT_UNCONDITIONAL = "direct_unconditional"
    DIRECT_CONDITIONAL = "direct_conditional"
    INDIRECT_CALL = "indirect_call"
    INDIRECT_JUMP = "indirect_jump"
    RETURN = "return"

    @property
    def is_branch(self) -> bool:
        return self is not BranchKind.NONE

    @property
    def is_direct(self) -> bool:
        return self in (BranchKind.DIRECT_UNCONDITIONAL, BranchKind.DIRECT_CONDITIONAL)

    @property
    def is_indirect(self) -> bool:
        return self in (BranchKind.INDIRECT_CALL, BranchKind.INDIRECT_JUMP, BranchKind.RETURN)


@dataclass(frozen=True)
class Instruction:
    address: int
    raw: bytes
    mnemonic: str
    branch: BranchKind
    target: int | None = None
    operands: str = ""
    section: str = "text"

    @property
    def end(self) -> int:
        return self.address + len(self.raw)


@dataclass(frozen=True)
class Gadget:
    """Straight-line instruction run terminated by exactly one branch.

    Inside a ``Cfg`` both ``start`` and ``direct_target`` are offsets from the
    module base; straight out of segmentation they are absolute addresses.
    """

    id: int
    start: int
    raw: bytes
    terminator: BranchKind
    direct_target: int | None = None
    instruction_count: int = 1

    @property
    def end(self) -> int:
        return self.start + len(self.raw)


class EdgeOrigin(str, Enum):
    STATIC_DIRECT = "static_direct"
    STATIC_FALLTHROUGH = "static_fallthrough"
    TRACE_WITNESSED = "trace_witnessed"


@dataclass(frozen=True)
class Tnt:
    bits: tuple[bool, ...]


@dataclass(frozen=True)
class Tip:
    target: int


@dataclass(frozen=True)
class Fup:
    address: int


TraceEvent = Union[Tnt, Tip, Fup]


@dataclass(frozen=True)
class TraceHeader:
    base: int
    entry: int
    version: int = 1


class ChainLabel(str, Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"

    @property
    def index(self) -> int:
        return 1 if self is ChainLabel.MALICIOUS else 0


@dataclass(frozen=True, order=True)
class GadgetChain:
    gadgets: tuple[int, ...]
    label: ChainLabel = field(default=ChainLabel.BENIGN, compare=False)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.gadgets, self.gadgets[1:]))


@dataclass(frozen=True)
class AttackPayload:
    gadgets: tuple[int, ...]
    hijack_point: int
    family: int = 0
    variant: str = "base"
