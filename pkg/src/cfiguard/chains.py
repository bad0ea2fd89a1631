"""CFG splitting into benign gadget chains and synthesis of malicious ones.

Benign chains follow the splitting rule: an edge leaving an indirect-terminated
gadget is one chain of two gadgets; an edge leaving a direct-terminated gadget
is extended by every successor of its destination into chains of three.
Malicious chains connect gadgets across at least one pair that is not an edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import logging
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .cfg import Cfg
from .errors import DataError
from .fingerprint import sha256_hex
from .models import ChainLabel, GadgetChain

logger = logging.getLogger(__name__)

DEFAULT_MALICIOUS_RATIO = 0.83
# Below this many candidate tuples the malicious space is enumerated exactly.
EXACT_ENUMERATION_LIMIT = 250_000
PAIR_FRACTION = 0.5


class InsufficientNodes(DataError):
    pass


class ChainFormatError(DataError):
    pass


@dataclass(frozen=True)
class ChainSet:
    benign: tuple[GadgetChain, ...]
    malicious: tuple[GadgetChain, ...]
    cfg_hash: str
    seed: int
    exhausted: bool = False
    options: dict[str, Any] = field(default_factory=dict)

    def dumps(self) -> str:
        lines = [
            "# cfiguard-chains v1",
            f"# cfg {self.cfg_hash}",
            f"# seed {self.seed}",
            f"# exhausted {int(self.exhausted)}",
        ]
        lines.extend(f"# option {key} {value}" for key, value in sorted(self.options.items()))
        for chain in (*self.benign, *self.malicious):
            lines.append(" ".join([chain.label.value, *(str(gadget) for gadget in chain.gadgets)]))
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        return sha256_hex(self.dumps())

    @classmethod
    def loads(cls, text: str) -> ChainSet:
        cfg_hash = ""
        seed = 0
        exhausted = False
        options: dict[str, Any] = {}
        benign: list[GadgetChain] = []
        malicious: list[GadgetChain] = []
        for line_number, line in enumerate(text.splitlines(), start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                if len(parts) >= 3 and parts[1] == "cfg":
                    cfg_hash = parts[2]
                elif len(parts) >= 3 and parts[1] == "seed":
                    seed = int(parts[2])
                elif len(parts) >= 3 and parts[1] == "exhausted":
                    exhausted = parts[2] == "1"
                elif len(parts) >= 4 and parts[1] == "option":
                    options[parts[2]] = " ".join(parts[3:])
                continue
            try:
                label = ChainLabel(parts[0])
                gadgets = tuple(int(value) for value in parts[1:])
            except ValueError as exc:
                raise ChainFormatError(f"Chain line {line_number}: {exc}") from exc
            if not 2 <= len(gadgets) <= 3:
                raise ChainFormatError(f"Chain line {line_number}: expected two or three gadget ids")
            (benign if label is ChainLabel.BENIGN else malicious).append(GadgetChain(gadgets, label))
        return cls(tuple(benign), tuple(malicious), cfg_hash, seed, exhausted, options)

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> ChainSet:
        return cls.loads(path.read_text(encoding="utf-8"))


def split_benign(cfg: Cfg, include_pairs: bool = True) -> list[GadgetChain]:
    """Benign chains: a pair per indirect edge, a triple per direct edge followed by another edge.

    Direct edges into a gadget with no successor fall back to a pair. With
    ``include_pairs`` off every pair is dropped, matching the malicious side.
    """
    found: set[tuple[int, ...]] = set()
    for first, second in sorted(cfg.edge_pairs()):
        terminator = cfg.node(first).terminator
        if terminator.is_indirect:
            found.add((first, second))
        elif terminator.is_direct:
            followers = cfg.successors(second)
            if followers:
                found.update((first, second, third) for third in followers)
            else:
                found.add((first, second))
    if not include_pairs:
        found = {gadgets for gadgets in found if len(gadgets) == 3}
    return [GadgetChain(gadgets, ChainLabel.BENIGN) for gadgets in sorted(found)]


def is_malicious_shape(
    cfg: Cfg,
    gadgets: Sequence[int],
    edges: set[tuple[int, int]],
    realistic: bool = True,
) -> bool:
    """True when some pair is a non-edge and, if ``realistic``, every such pair leaves an indirect gadget."""
    violated = [(src, dst) for src, dst in zip(gadgets, gadgets[1:]) if (src, dst) not in edges]
    if not violated:
        return False
    if realistic:
        return all(cfg.node(src).terminator.is_indirect for src, _ in violated)
    return True


def _enumerate_candidates(
    cfg: Cfg, edges: set[tuple[int, int]], include_pairs: bool, realistic: bool
) -> list[tuple[int, ...]]:
    ids = range(len(cfg))
    candidates: list[tuple[int, ...]] = []
    if include_pairs:
        candidates.extend(
            pair for pair in itertools.product(ids, repeat=2) if is_malicious_shape(cfg, pair, edges, realistic)
        )
    candidates.extend(
        triple for triple in itertools.product(ids, repeat=3) if is_malicious_shape(cfg, triple, edges, realistic)
    )
    return candidates


def _sample_candidate(
    rng: np.random.Generator,
    cfg: Cfg,
    sources: Sequence[int],
    fed_sources: Sequence[int],
    include_pairs: bool,
) -> tuple[int, ...]:
    node_count = len(cfg)
    if include_pairs and rng.random() < PAIR_FRACTION:
        return (int(sources[rng.integers(len(sources))]), int(rng.integers(node_count)))
    if fed_sources and rng.random() < 0.5:
        # Real first hop into an indirect gadget, diverted on the second hop.
        middle = int(fed_sources[rng.integers(len(fed_sources))])
        predecessors = cfg.predecessors(middle)
        first = int(predecessors[rng.integers(len(predecessors))])
        return (first, middle, int(rng.integers(node_count)))
    first = int(sources[rng.integers(len(sources))])
    middle = int(rng.integers(node_count))
    followers = cfg.successors(middle)
    if followers and rng.random() < 0.5:
        last = int(followers[rng.integers(len(followers))])
    else:
        last = int(rng.integers(node_count))
    return (first, middle, last)


def gen_malicious(
    cfg: Cfg,
    count: int,
    seed: int,
    benign: Iterable[GadgetChain] = (),
    include_pairs: bool = True,
    realistic: bool = True,
) -> tuple[list[GadgetChain], bool]:
    """Return ``(chains, exhausted)``; ``exhausted`` is set when fewer than ``count`` exist or were found."""
    if len(cfg) < 3:
        raise InsufficientNodes(f"Need at least 3 gadgets to synthesize malicious chains, have {len(cfg)}")
    if count <= 0:
        return [], False

    edges = cfg.edge_pairs()
    excluded = {chain.gadgets for chain in benign}
    rng = np.random.default_rng([seed, 0xC4])
    chosen: set[tuple[int, ...]] = set()

    exact_space = (len(cfg) ** 3 + (len(cfg) ** 2 if include_pairs else 0))
    if exact_space <= EXACT_ENUMERATION_LIMIT:
        candidates = [
            candidate
            for candidate in _enumerate_candidates(cfg, edges, include_pairs, realistic)
            if candidate not in excluded
        ]
        order = rng.permutation(len(candidates))
        chosen.update(candidates[int(index)] for index in order[:count])
        exhausted = len(candidates) < count
    else:
        sources = [g.id for g in cfg.nodes if g.terminator.is_indirect] if realistic else list(range(len(cfg)))
        if not sources:
            return [], True
        fed_sources = [gadget_id for gadget_id in sources if cfg.predecessors(gadget_id)]
        budget = 50 * count + 1_000
        attempts = 0
        while len(chosen) < count and attempts < budget:
            attempts += 1
            candidate = _sample_candidate(rng, cfg, sources, fed_sources, include_pairs)
            if candidate in chosen or candidate in excluded:
                continue
            if is_malicious_shape(cfg, candidate, edges, realistic):
                chosen.add(candidate)
        exhausted = len(chosen) < count

    if exhausted:
        logger.warning("Malicious chain space exhausted: requested=%s produced=%s", count, len(chosen))
    return [GadgetChain(gadgets, ChainLabel.MALICIOUS) for gadgets in sorted(chosen)], exhausted


def default_malicious_count(benign_count: int, ratio: float = DEFAULT_MALICIOUS_RATIO) -> int:
    return math.ceil(ratio * benign_count)


def split_cfg(
    cfg: Cfg,
    seed: int,
    malicious_count: int | None = None,
    malicious_ratio: float = DEFAULT_MALICIOUS_RATIO,
    include_pairs: bool = True,
    realistic: bool = True,
) -> ChainSet:
    benign = split_benign(cfg, include_pairs)
    count = default_malicious_count(len(benign), malicious_ratio) if malicious_count is None else malicious_count
    malicious, exhausted = gen_malicious(cfg, count, seed, benign, include_pairs, realistic)
    chain_set = ChainSet(
        benign=tuple(benign),
        malicious=tuple(malicious),
        cfg_hash=cfg.digest,
        seed=seed,
        exhausted=exhausted,
        options={"include_pairs": int(include_pairs), "realistic": int(realistic)},
    )
    logger.info("CFG split: benign=%s malicious=%s exhausted=%s", len(benign), len(malicious), exhausted)
    return chain_set
