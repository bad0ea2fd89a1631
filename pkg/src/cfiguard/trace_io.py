"""Simplified branch-trace packets, benign execution simulation and attack injection.

Wire format (all integers little-endian)::

    header   "DCTR"  u8 version=1  u64 base  u64 entry
    TNT      0x01  u8 count (1..6)  u8 bits   (bit 0 is the oldest branch)
    TIP      0x02  u64 target
    FUP      0x03  u64 address
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
import struct
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cfg import Cfg
from .errors import DataError, UnknownGadgetId
from .models import AttackPayload, BranchKind, Fup, Tip, Tnt, TraceEvent, TraceHeader
from . import replay

logger = logging.getLogger(__name__)

TRACE_MAGIC = b"DCTR"
TRACE_VERSION = 1
TRACE_SUFFIX = ".dctr"
MAX_TNT_BITS = 6

PACKET_TNT = 0x01
PACKET_TIP = 0x02
PACKET_FUP = 0x03

_HEADER = struct.Struct("<4sBQQ")
_ADDRESS = struct.Struct("<Q")


class TraceFormatError(DataError):
    pass


class BadMagic(TraceFormatError):
    pass


class UnsupportedVersion(TraceFormatError):
    pass


class TruncatedPacket(TraceFormatError):
    def __init__(self, offset: int):
        super().__init__(f"Trace ends inside a packet at byte offset {offset}")
        self.offset = offset


class UnknownPacketType(TraceFormatError):
    def __init__(self, packet_type: int, offset: int):
        super().__init__(f"Unknown packet type {packet_type:#04x} at byte offset {offset}")
        self.packet_type = packet_type
        self.offset = offset


class MalformedPacket(TraceFormatError):
    pass


class TooManyTntBits(DataError, ValueError):
    def __init__(self, count: int):
        super().__init__(f"TNT packet carries {count} bits; at most {MAX_TNT_BITS} allowed")
        self.count = count


class DeadEnd(DataError):
    def __init__(self, gadget_id: int, step: int):
        super().__init__(f"Walk reached gadget {gadget_id} with no successor at step {step}")
        self.gadget_id = gadget_id
        self.step = step


class InvalidHijackPoint(DataError):
    pass


def encode_trace(header: TraceHeader, events: Iterable[TraceEvent]) -> bytes:
    chunks = [_HEADER.pack(TRACE_MAGIC, header.version, header.base, header.entry)]
    for event in events:
        if isinstance(event, Tnt):
            count = len(event.bits)
            if count > MAX_TNT_BITS:
                raise TooManyTntBits(count)
            if count == 0:
                raise MalformedPacket("TNT packet without bits")
            bits = 0
            for position, taken in enumerate(event.bits):
                if taken:
                    bits |= 1 << position
            chunks.append(bytes((PACKET_TNT, count, bits)))
        elif isinstance(event, Tip):
            chunks.append(bytes((PACKET_TIP,)) + _ADDRESS.pack(event.target))
        elif isinstance(event, Fup):
            chunks.append(bytes((PACKET_FUP,)) + _ADDRESS.pack(event.address))
        else:
            raise TypeError(f"Not a trace event: {event!r}")
    return b"".join(chunks)


def decode_header(data: bytes) -> TraceHeader:
    if len(data) < _HEADER.size:
        if not TRACE_MAGIC.startswith(data[:4]) or len(data) < 4:
            raise BadMagic("Trace is shorter than its header")
        raise TruncatedPacket(len(data))
    magic, version, base, entry = _HEADER.unpack_from(data, 0)
    if magic != TRACE_MAGIC:
        raise BadMagic(f"Bad trace magic {magic!r}")
    if version != TRACE_VERSION:
        raise UnsupportedVersion(f"Unsupported trace version {version}")
    return TraceHeader(base=base, entry=entry, version=version)


def decode_trace(data: bytes) -> tuple[TraceHeader, list[TraceEvent]]:
    header = decode_header(data)
    events: list[TraceEvent] = []
    offset = _HEADER.size
    size = len(data)

    while offset < size:
        packet_type = data[offset]
        if packet_type == PACKET_TNT:
            if offset + 3 > size:
                raise TruncatedPacket(offset)
            count, bits = data[offset + 1], data[offset + 2]
            if not 1 <= count <= MAX_TNT_BITS:
                raise MalformedPacket(f"TNT bit count {count} at byte offset {offset}")
            events.append(Tnt(tuple(bool(bits >> position & 1) for position in range(count))))
            offset += 3
        elif packet_type in (PACKET_TIP, PACKET_FUP):
            if offset + 1 + _ADDRESS.size > size:
                raise TruncatedPacket(offset)
            (address,) = _ADDRESS.unpack_from(data, offset + 1)
            events.append(Tip(address) if packet_type == PACKET_TIP else Fup(address))
            offset += 1 + _ADDRESS.size
        else:
            raise UnknownPacketType(packet_type, offset)
    return header, events


def write_trace(path: Path, header: TraceHeader, events: Iterable[TraceEvent]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_trace(header, events))


def read_trace(path: Path) -> tuple[TraceHeader, list[TraceEvent]]:
    return decode_trace(path.read_bytes())


@dataclass(frozen=True)
class Simulation:
    header: TraceHeader
    events: tuple[TraceEvent, ...]
    walk: tuple[tuple[int, int], ...]
    ended_early: bool = False


def successor_map_from_cfg(cfg: Cfg) -> dict[int, tuple[int, ...]]:
    return {gadget.id: tuple(cfg.successors(gadget.id)) for gadget in cfg.nodes}


def indirect_successors_from_offsets(cfg: Cfg, targets: Mapping[int, Sequence[int]]) -> dict[int, tuple[int, ...]]:
    """Translate a ground-truth map keyed by gadget offsets into gadget ids."""
    resolved: dict[int, tuple[int, ...]] = {}
    for source_offset, target_offsets in targets.items():
        source = cfg.node_at_offset(source_offset)
        if source is None:
            raise DataError(f"Ground-truth source {source_offset:#x} is not a gadget start")
        ids = []
        for target_offset in target_offsets:
            target = cfg.node_at_offset(target_offset)
            if target is None:
                raise DataError(f"Ground-truth target {target_offset:#x} is not a gadget start")
            ids.append(target.id)
        resolved[source.id] = tuple(sorted(set(ids)))
    return resolved


def simulate_execution(
    cfg: Cfg,
    base: int,
    steps: int,
    seed: int,
    indirect_successors: Mapping[int, Sequence[int]] | None = None,
    entry_id: int = 0,
    strict: bool = False,
) -> Simulation:
    """Seeded random walk over the CFG emitting the packets a tracer would record.

    Direct gadgets follow their static edges; indirect gadgets pick uniformly
    among ``indirect_successors`` (the ground-truth policy), falling back to
    the CFG's own successors when no map is given.
    """
    if len(cfg) == 0:
        raise DataError("Cannot simulate an empty CFG")
    rng = np.random.default_rng([seed, 0x51])
    cfg.node(entry_id)

    def _indirect_choices(gadget_id: int) -> Sequence[int]:
        if indirect_successors is None:
            return cfg.successors(gadget_id)
        return indirect_successors.get(gadget_id, ())

    events: list[TraceEvent] = []
    walk: list[tuple[int, int]] = []
    bits: list[bool] = []

    def _flush_bits() -> None:
        if bits:
            events.append(Tnt(tuple(bits)))
            bits.clear()

    current = entry_id
    ended_early = False
    for step in range(steps):
        gadget = cfg.node(current)
        successor: int | None = None
        if gadget.terminator is BranchKind.DIRECT_UNCONDITIONAL:
            successor = cfg.static_target(current)
        elif gadget.terminator is BranchKind.DIRECT_CONDITIONAL:
            options = [
                (taken, dst)
                for taken, dst in ((True, cfg.static_target(current)), (False, cfg.fallthrough(current)))
                if dst is not None
            ]
            if options:
                taken, successor = options[int(rng.integers(len(options)))]
                bits.append(taken)
                if len(bits) == MAX_TNT_BITS:
                    _flush_bits()
        else:
            choices = _indirect_choices(current)
            if len(choices):
                successor = int(choices[int(rng.integers(len(choices)))])
                _flush_bits()
                events.append(Tip(base + cfg.node(successor).start))

        if successor is None:
            if strict:
                raise DeadEnd(current, step)
            ended_early = True
            logger.debug("Walk ended early at gadget %s after %s steps.", current, step)
            break
        walk.append((current, successor))
        current = successor

    _flush_bits()
    header = TraceHeader(base=base, entry=base + cfg.node(entry_id).start)
    return Simulation(header=header, events=tuple(events), walk=tuple(walk), ended_early=ended_early)


def write_walk_log(path: Path, walk: Iterable[tuple[int, int]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{src} {dst}\n" for src, dst in walk), encoding="utf-8")


def read_walk_log(path: Path) -> list[tuple[int, int]]:
    walk = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"Walk log line {line_number}: expected 'src dst'")
        walk.append((int(parts[0]), int(parts[1])))
    return walk


def inject_attack(
    events: Sequence[TraceEvent],
    payload: AttackPayload,
    cfg: Cfg,
    base: int,
    *,
    entry: int,
) -> list[TraceEvent]:
    """Divert the Tip at ``payload.hijack_point`` into the payload's gadget walk.

    The prefix is replayed from ``entry`` to find the gadget the hijacked Tip
    leaves; it must be indirect-terminated, and at least one transfer of the
    diverted walk must be a CFG non-edge. Events after the hijack point are
    discarded: once control is diverted the benign continuation never happens.
    """
    point = payload.hijack_point
    if not 0 <= point < len(events) or not isinstance(events[point], Tip):
        raise InvalidHijackPoint(f"Event {point} is not a TIP packet")
    if len(payload.gadgets) < 2:
        raise InvalidHijackPoint("Payload needs at least two gadgets")
    try:
        injected = [Tip(base + cfg.node(gadget_id).start) for gadget_id in payload.gadgets]
    except UnknownGadgetId as exc:
        raise InvalidHijackPoint(f"Payload references {exc}") from exc

    source = None
    for index, tip_source, _ in replay.tip_sources(cfg, TraceHeader(base=base, entry=entry), events[: point + 1]):
        if index == point:
            source = tip_source
    if source is None or not cfg.node(source).terminator.is_indirect:
        raise InvalidHijackPoint(f"TIP at event {point} does not leave an indirect-terminated gadget")

    walk = (source, *payload.gadgets)
    edges = cfg.edge_pairs()
    if all(pair in edges for pair in zip(walk, walk[1:])):
        raise InvalidHijackPoint(f"Payload from gadget {source} follows CFG edges only")
    return [*events[:point], *injected]
