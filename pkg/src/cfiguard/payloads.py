"""Synthesized code-reuse payloads and their hand-edited variants.

A family starts from a base payload: a walk through indirect-terminated
gadgets whose first hop, from the gadget that owns the hijacked TIP, is not a
CFG edge. Variants swap two later gadgets, substitute one with another gadget
ending in the same branch kind, or do both.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .cfg import Cfg
from .errors import ConfigError, DataError
from .fingerprint import canonical_json
from .models import AttackPayload, BranchKind, TraceEvent, TraceHeader
from . import replay

logger = logging.getLogger(__name__)

VARIANTS = ("base", "swap", "substitute", "swap+substitute")
# Share of payload gadgets drawn from ``ret``-terminated gadgets when any exist.
RETURN_PREFERENCE = 0.8


class NoHijackPoint(DataError):
    pass


class NoPayloadGadgets(DataError):
    pass


@dataclass(frozen=True)
class PayloadRecord:
    """One line of an attack manifest: a payload and the trace it was injected into."""

    payload: AttackPayload
    trace: str
    source_trace: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.payload.family,
            "variant": self.payload.variant,
            "hijack_point": self.payload.hijack_point,
            "gadgets": list(self.payload.gadgets),
            "trace": self.trace,
            "source_trace": self.source_trace,
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> PayloadRecord:
        payload = AttackPayload(
            gadgets=tuple(int(gadget) for gadget in record["gadgets"]),
            hijack_point=int(record["hijack_point"]),
            family=int(record.get("family", 0)),
            variant=str(record.get("variant", "base")),
        )
        return cls(payload, str(record["trace"]), str(record.get("source_trace", "")))


def tip_sources(cfg: Cfg, header: TraceHeader, events: Iterable[TraceEvent]) -> list[tuple[int, int]]:
    """Hijackable TIP packets: ``(event index, source gadget id)`` for each Tip leaving an indirect gadget."""
    return [
        (index, source)
        for index, source, destination in replay.tip_sources(cfg, header, events)
        if source is not None and destination is not None
    ]


class _GadgetPool:
    def __init__(self, cfg: Cfg, rng: np.random.Generator):
        self.rng = rng
        self.indirect = [gadget.id for gadget in cfg.nodes if gadget.terminator.is_indirect]
        self.returns = [gadget.id for gadget in cfg.nodes if gadget.terminator is BranchKind.RETURN]
        self.by_kind: dict[BranchKind, list[int]] = {}
        for gadget in cfg.nodes:
            if gadget.terminator.is_indirect:
                self.by_kind.setdefault(gadget.terminator, []).append(gadget.id)

    def draw(self) -> int:
        group = self.returns if self.returns and self.rng.random() < RETURN_PREFERENCE else self.indirect
        return int(group[int(self.rng.integers(len(group)))])

    def equivalent(self, cfg: Cfg, gadget_id: int, avoid: set[int]) -> int | None:
        peers = [peer for peer in self.by_kind[cfg.node(gadget_id).terminator] if peer not in avoid]
        if not peers:
            return None
        return int(peers[int(self.rng.integers(len(peers)))])


def _swap(rng: np.random.Generator, gadgets: list[int]) -> list[int] | None:
    # Position 0 stays put so the first hop remains a non-edge.
    if len(gadgets) < 3:
        return None
    first, second = sorted(int(value) for value in rng.choice(np.arange(1, len(gadgets)), size=2, replace=False))
    if gadgets[first] == gadgets[second]:
        return None
    swapped = list(gadgets)
    swapped[first], swapped[second] = swapped[second], swapped[first]
    return swapped


def _substitute(rng: np.random.Generator, pool: _GadgetPool, cfg: Cfg, gadgets: list[int]) -> list[int] | None:
    position = int(rng.integers(1, len(gadgets)))
    replacement = pool.equivalent(cfg, gadgets[position], avoid={gadgets[position]})
    if replacement is None:
        return None
    changed = list(gadgets)
    changed[position] = replacement
    return changed


def generate_payloads(
    cfg: Cfg,
    sources: Sequence[tuple[int, int]],
    count: int,
    seed: int,
    min_len: int = 3,
    max_len: int = 6,
) -> list[AttackPayload]:
    if count < 0:
        raise ConfigError("Payload count must be non-negative")
    if not 2 <= min_len <= max_len:
        raise ConfigError("Payload lengths need 2 <= min_len <= max_len")
    if count == 0:
        return []
    if not sources:
        raise NoHijackPoint("Trace holds no TIP leaving an indirect gadget")

    rng = np.random.default_rng([seed, 0xA7])
    pool = _GadgetPool(cfg, rng)
    if len(pool.indirect) < 2:
        raise NoPayloadGadgets("CFG has fewer than two indirect-terminated gadgets")

    edges = cfg.edge_pairs()
    payloads: list[AttackPayload] = []
    seen: set[tuple[int, tuple[int, ...]]] = set()
    family = 0
    attempts = 0
    budget = 100 * count + 1_000

    while len(payloads) < count and attempts < budget:
        attempts += 1
        hijack_point, source = sources[int(rng.integers(len(sources)))]
        openers = [gadget_id for gadget_id in pool.indirect if (source, gadget_id) not in edges]
        if not openers:
            continue
        length = int(rng.integers(min_len, max_len + 1))
        gadgets = [int(openers[int(rng.integers(len(openers)))])]
        while len(gadgets) < length:
            candidate = pool.draw()
            if candidate != gadgets[-1]:
                gadgets.append(candidate)

        swapped = _swap(rng, gadgets)
        substituted = _substitute(rng, pool, cfg, gadgets)
        both = _substitute(rng, pool, cfg, swapped) if swapped is not None else None
        members = zip(VARIANTS, (gadgets, swapped, substituted, both))

        key = (hijack_point, tuple(gadgets))
        if key in seen:
            continue
        for variant, member in members:
            if member is None or len(payloads) >= count:
                continue
            key = (hijack_point, tuple(member))
            if key in seen:
                continue
            seen.add(key)
            payloads.append(AttackPayload(tuple(member), hijack_point, family, variant))
        family += 1

    if len(payloads) < count:
        logger.warning("Payload space exhausted: requested=%s produced=%s", count, len(payloads))
    logger.info("Generated %s payloads in %s families.", len(payloads), family)
    return payloads


def write_manifest(path: Path, records: Iterable[PayloadRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(canonical_json(record.to_dict()) + "\n" for record in records), encoding="utf-8")


def read_manifest(path: Path) -> list[PayloadRecord]:
    records = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(PayloadRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Manifest line {line_number}: {exc}") from exc
    return records
