from __future__ import annotations

from bisect import bisect_right
from dataclasses import replace
import logging
import operator
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Sequence

import networkx

from .errors import ComponentMismatch, DataError, UnknownGadgetId
from .fingerprint import canonical_json, fingerprint_payload, sha256_hex
from .models import BranchKind, EdgeOrigin, Gadget, TraceEvent, TraceHeader
from .replay import UnresolvableTipTarget, tip_sources

if TYPE_CHECKING:
    from .encoder import OffsetTable

logger = logging.getLogger(__name__)

CFG_FORMAT = "cfiguard-cfg"
CFG_VERSION = 1

Edge = tuple[int, int, EdgeOrigin]


class DuplicateGadgetStart(DataError):
    def __init__(self, start: int):
        super().__init__(f"Two gadgets start at {start:#x}")
        self.start = start


class CfgFormatError(DataError):
    pass


class Cfg:
    """Immutable gadget-level control-flow graph.

    Gadget ``start``/``direct_target`` values are offsets from ``base``.
    Edges are keyed by their origin, so one (src, dst) pair may be both
    statically derived and trace-witnessed.
    """

    def __init__(
        self,
        gadgets: Sequence[Gadget],
        edges: Iterable[Edge],
        base: int,
        diagnostics: Mapping[str, int] | None = None,
    ):
        graph = networkx.MultiDiGraph()
        ordered = sorted(gadgets, key=lambda gadget: gadget.id)
        for expected, gadget in enumerate(ordered):
            if gadget.id != expected:
                raise CfgFormatError(f"Gadget ids must be dense from 0; found {gadget.id} at {expected}")
            graph.add_node(gadget.id, gadget=gadget)

        self._by_offset: dict[int, int] = {}
        for gadget in ordered:
            if gadget.start in self._by_offset:
                raise DuplicateGadgetStart(gadget.start)
            self._by_offset[gadget.start] = gadget.id

        for src, dst, origin in edges:
            if src not in graph or dst not in graph:
                raise UnknownGadgetId(src if src not in graph else dst)
            graph.add_edge(src, dst, key=EdgeOrigin(origin))

        self._gadgets: tuple[Gadget, ...] = tuple(ordered)
        self._starts = sorted(self._by_offset)
        self._graph = networkx.freeze(graph)
        self.base = base
        self.diagnostics: dict[str, int] = dict(diagnostics or {})
        self._digest: str | None = None
        self._node_hash: str | None = None

    def __len__(self) -> int:
        return len(self._gadgets)

    @property
    def graph(self) -> networkx.MultiDiGraph:
        return self._graph

    @property
    def nodes(self) -> tuple[Gadget, ...]:
        return self._gadgets

    def node(self, gadget_id: int) -> Gadget:
        try:
            index = operator.index(gadget_id)
        except TypeError:
            raise UnknownGadgetId(gadget_id) from None
        if not 0 <= index < len(self._gadgets):
            raise UnknownGadgetId(gadget_id)
        return self._gadgets[index]

    def node_at_offset(self, offset: int) -> Gadget | None:
        gadget_id = self._by_offset.get(offset)
        return None if gadget_id is None else self._gadgets[gadget_id]

    def containing_offset(self, offset: int) -> Gadget | None:
        index = bisect_right(self._starts, offset) - 1
        if index < 0:
            return None
        gadget = self._gadgets[self._by_offset[self._starts[index]]]
        return gadget if gadget.start <= offset < gadget.end else None

    def edges(self) -> list[Edge]:
        return sorted(
            ((src, dst, origin) for src, dst, origin in self._graph.edges(keys=True)),
            key=lambda edge: (edge[0], edge[1], edge[2].value),
        )

    def edge_pairs(self) -> set[tuple[int, int]]:
        return {(src, dst) for src, dst, _ in self._graph.edges(keys=True)}

    def has_edge(self, src: int, dst: int) -> bool:
        self.node(src)
        self.node(dst)
        return self._graph.has_edge(src, dst)

    def successors(self, gadget_id: int) -> list[int]:
        self.node(gadget_id)
        return sorted(set(self._graph.successors(gadget_id)))

    def predecessors(self, gadget_id: int) -> list[int]:
        self.node(gadget_id)
        return sorted(set(self._graph.predecessors(gadget_id)))

    def _successor_by_origin(self, gadget_id: int, origin: EdgeOrigin) -> int | None:
        for _, dst, key in self._graph.out_edges(gadget_id, keys=True):
            if key is origin:
                return dst
        return None

    def static_target(self, gadget_id: int) -> int | None:
        return self._successor_by_origin(gadget_id, EdgeOrigin.STATIC_DIRECT)

    def fallthrough(self, gadget_id: int) -> int | None:
        return self._successor_by_origin(gadget_id, EdgeOrigin.STATIC_FALLTHROUGH)

    def with_edges(self, extra: Iterable[Edge]) -> Cfg:
        return Cfg(self._gadgets, [*self.edges(), *extra], self.base, self.diagnostics)

    def to_document(self) -> dict[str, Any]:
        edges = self.edges()
        return {
            "format": CFG_FORMAT,
            "version": CFG_VERSION,
            "base": self.base,
            "node_count": len(self._gadgets),
            "edge_count": len(edges),
            "diagnostics": dict(sorted(self.diagnostics.items())),
            "nodes": [
                [g.id, g.start, g.terminator.value, g.raw.hex(), g.direct_target, g.instruction_count]
                for g in self._gadgets
            ],
            "edges": [[src, dst, origin.value] for src, dst, origin in edges],
        }

    def dumps(self) -> str:
        return canonical_json(self.to_document()) + "\n"

    @classmethod
    def from_document(cls, document: Mapping[str, Any]) -> Cfg:
        if document.get("format") != CFG_FORMAT:
            raise CfgFormatError(f"Not a CFG document (format={document.get('format')!r})")
        if document.get("version") != CFG_VERSION:
            raise CfgFormatError(f"Unsupported CFG version {document.get('version')!r}")
        try:
            gadgets = [
                Gadget(
                    id=int(node_id),
                    start=int(start),
                    raw=bytes.fromhex(raw_hex),
                    terminator=BranchKind(terminator),
                    direct_target=None if target is None else int(target),
                    instruction_count=int(count),
                )
                for node_id, start, terminator, raw_hex, target, count in document["nodes"]
            ]
            edges = [(int(src), int(dst), EdgeOrigin(origin)) for src, dst, origin in document["edges"]]
            cfg = cls(gadgets, edges, int(document["base"]), document.get("diagnostics"))
        except (KeyError, TypeError, ValueError) as exc:
            raise CfgFormatError(f"Corrupt CFG document: {exc}") from exc
        if len(cfg) != document.get("node_count") or len(cfg.edges()) != document.get("edge_count"):
            raise CfgFormatError("CFG header counts do not match its body")
        return cfg

    @property
    def digest(self) -> str:
        if self._digest is None:
            self._digest = sha256_hex(self.dumps())
        return self._digest

    @property
    def node_hash(self) -> str:
        """Hash over the gadget set alone; stable across refinement."""
        if self._node_hash is None:
            document = self.to_document()
            self._node_hash = fingerprint_payload({"base": self.base, "nodes": document["nodes"]})
        return self._node_hash


def has_edge(cfg: Cfg, src: int, dst: int) -> bool:
    return cfg.has_edge(src, dst)


def build_static_cfg(gadgets: Sequence[Gadget], base: int) -> Cfg:
    seen: set[int] = set()
    for gadget in gadgets:
        if gadget.start in seen:
            raise DuplicateGadgetStart(gadget.start)
        seen.add(gadget.start)
        if gadget.start < base:
            raise CfgFormatError(f"Gadget at {gadget.start:#x} lies below base {base:#x}")

    relocated = [
        replace(
            gadget,
            id=index,
            start=gadget.start - base,
            direct_target=None if gadget.direct_target is None else gadget.direct_target - base,
        )
        for index, gadget in enumerate(sorted(gadgets, key=lambda item: item.start))
    ]
    by_offset = {gadget.start: gadget.id for gadget in relocated}
    starts = sorted(by_offset)

    def _inside_some_gadget(offset: int) -> bool:
        index = bisect_right(starts, offset) - 1
        if index < 0:
            return False
        owner = relocated[by_offset[starts[index]]]
        return owner.start < offset < owner.end

    edges: list[Edge] = []
    mid_gadget = 0
    unresolved = 0
    for gadget in relocated:
        if not gadget.terminator.is_direct:
            continue
        target = gadget.direct_target
        destination = by_offset.get(target) if target is not None else None
        if destination is not None:
            edges.append((gadget.id, destination, EdgeOrigin.STATIC_DIRECT))
        elif target is not None and _inside_some_gadget(target):
            mid_gadget += 1
            logger.debug("Gadget %s targets %#x inside another gadget.", gadget.id, target)
        else:
            unresolved += 1
        if gadget.terminator is BranchKind.DIRECT_CONDITIONAL:
            follower = by_offset.get(gadget.end)
            if follower is not None:
                edges.append((gadget.id, follower, EdgeOrigin.STATIC_FALLTHROUGH))

    cfg = Cfg(
        relocated,
        edges,
        base,
        diagnostics={"mid_gadget_targets": mid_gadget, "unresolved_targets": unresolved},
    )
    logger.info(
        "Static CFG built: nodes=%s edges=%s mid_gadget_targets=%s unresolved_targets=%s",
        len(cfg),
        len(cfg.edges()),
        mid_gadget,
        unresolved,
    )
    return cfg


def refine_cfg(
    cfg: Cfg,
    header: TraceHeader,
    events: Iterable[TraceEvent],
    table: OffsetTable,
) -> Cfg:
    if table.node_hash != cfg.node_hash:
        raise ComponentMismatch("Offset table was built from a different gadget set than the CFG")

    def _resolve(offset: int) -> int | None:
        entry = table.lookup(offset)
        return None if entry is None else entry.gadget_id

    events = list(events)
    witnessed: set[tuple[int, int]] = set()
    skipped = 0
    for index, source, destination in tip_sources(cfg, header, events, resolve=_resolve):
        if destination is None:
            raise UnresolvableTipTarget(events[index].target, index)
        if source is None:
            skipped += 1
            continue
        witnessed.add((source, destination))

    known = cfg.edge_pairs()
    added = sorted(pair for pair in witnessed if pair not in known)
    if skipped:
        logger.warning("Refinement skipped %s TIP packets that arrived off an indirect gadget.", skipped)
    refined = cfg.with_edges((src, dst, EdgeOrigin.TRACE_WITNESSED) for src, dst in witnessed)
    logger.info(
        "CFG refined: witnessed=%s new_pairs=%s edges=%s", len(witnessed), len(added), len(refined.edges())
    )
    return refined
