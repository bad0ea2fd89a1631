"""Execution cursor shared by CFG refinement, payload placement and detection.

The cursor mirrors how a branch-trace decoder walks the binary: direct
unconditional branches are followed statically, each conditional branch
consumes one TNT bit in FIFO order, and an indirect terminator parks the
cursor until the next TIP packet supplies the destination.
"""

from __future__ import annotations

from collections import deque
from typing import TYPE_CHECKING, Callable, Iterable, Iterator

from .errors import DataError
from .models import BranchKind, Fup, Tip, Tnt, TraceEvent, TraceHeader

if TYPE_CHECKING:
    from .cfg import Cfg


class MissingStaticSuccessor(DataError):
    def __init__(self, gadget_id: int, reason: str = "no static successor"):
        super().__init__(f"Gadget {gadget_id}: {reason}")
        self.gadget_id = gadget_id


class UnresolvableEntry(DataError):
    def __init__(self, address: int, base: int):
        super().__init__(f"Trace entry {address:#x} (base {base:#x}) is not a gadget start")
        self.address = address
        self.base = base


class UnresolvableTipTarget(DataError):
    def __init__(self, address: int, event_index: int | None = None):
        where = f" at event {event_index}" if event_index is not None else ""
        super().__init__(f"TIP target {address:#x}{where} maps to no gadget start")
        self.address = address
        self.event_index = event_index


class TraceCursor:
    def __init__(self, cfg: Cfg, start_id: int):
        cfg.node(start_id)
        self.cfg = cfg
        self.current = start_id
        self.pending_bits: deque[bool] = deque()
        self.visited: list[int] = [start_id]
        self.lost = False

    @classmethod
    def from_header(cls, cfg: Cfg, header: TraceHeader) -> TraceCursor:
        gadget = cfg.node_at_offset(header.entry - header.base)
        if gadget is None:
            raise UnresolvableEntry(header.entry, header.base)
        return cls(cfg, gadget.id)

    @property
    def at_indirect(self) -> bool:
        return not self.lost and self.cfg.node(self.current).terminator.is_indirect

    def feed(self, bits: Iterable[bool]) -> None:
        if not self.lost:
            self.pending_bits.extend(bits)

    def _move(self, gadget_id: int) -> None:
        self.current = gadget_id
        self.visited.append(gadget_id)

    def jump(self, gadget_id: int) -> None:
        """Place the cursor at a TIP destination; clears a lost state."""
        self.cfg.node(gadget_id)
        self.lost = False
        self._move(gadget_id)

    def advance(self) -> None:
        if self.lost:
            return
        unconditional_hops = 0
        while True:
            gadget = self.cfg.node(self.current)
            if gadget.terminator is BranchKind.DIRECT_UNCONDITIONAL:
                successor = self.cfg.static_target(gadget.id)
                if successor is None:
                    self.lost = True
                    raise MissingStaticSuccessor(gadget.id, "direct jump target is not a gadget start")
                unconditional_hops += 1
                if unconditional_hops > len(self.cfg):
                    self.lost = True
                    raise MissingStaticSuccessor(gadget.id, "direct-jump cycle with no exit")
                self._move(successor)
            elif gadget.terminator is BranchKind.DIRECT_CONDITIONAL:
                if not self.pending_bits:
                    return
                unconditional_hops = 0
                taken = self.pending_bits.popleft()
                successor = self.cfg.static_target(gadget.id) if taken else self.cfg.fallthrough(gadget.id)
                if successor is None:
                    self.lost = True
                    side = "taken target" if taken else "fall-through"
                    raise MissingStaticSuccessor(gadget.id, f"conditional {side} is not a gadget start")
                self._move(successor)
            else:
                return

    def mark_lost(self) -> None:
        self.lost = True
        self.pending_bits.clear()


def tip_sources(
    cfg: Cfg,
    header: TraceHeader,
    events: Iterable[TraceEvent],
    resolve: Callable[[int], int | None] | None = None,
) -> Iterator[tuple[int, int | None, int | None]]:
    """Yield ``(event index, source gadget id, destination gadget id)`` per Tip.

    The source is ``None`` when the cursor is lost or not parked at an
    indirect gadget; the destination is ``None`` when the address resolves to
    no gadget start (the cursor is then lost until the next resolvable Tip).
    ``resolve`` maps a base-relative offset to a gadget id and defaults to the
    CFG's own start index.
    """
    if resolve is None:
        def resolve(offset: int) -> int | None:
            gadget = cfg.node_at_offset(offset)
            return None if gadget is None else gadget.id

    cursor = TraceCursor.from_header(cfg, header)
    try:
        cursor.advance()
    except MissingStaticSuccessor:
        cursor.mark_lost()

    for index, event in enumerate(events):
        if isinstance(event, Tnt):
            cursor.feed(event.bits)
            try:
                cursor.advance()
            except MissingStaticSuccessor:
                cursor.mark_lost()
        elif isinstance(event, Tip):
            source = cursor.current if cursor.at_indirect else None
            destination = resolve(event.target - header.base)
            if destination is None:
                cursor.mark_lost()
                yield index, source, None
                continue
            cursor.jump(destination)
            yield index, source, destination
            try:
                cursor.advance()
            except MissingStaticSuccessor:
                cursor.mark_lost()
        elif isinstance(event, Fup):
            continue
