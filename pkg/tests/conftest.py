from __future__ import annotations

import json
from typing import Callable

import numpy as np
import pytest

from cfiguard.cfg import Cfg, build_static_cfg, refine_cfg
from cfiguard.encoder import OffsetTable, build_offset_table
from cfiguard.listing import parse_listing, segment_gadgets
from cfiguard.models import BranchKind, EdgeOrigin, Gadget
from cfiguard.synthetic import SyntheticProgram, generate_program
from cfiguard.trace_io import Simulation, indirect_successors_from_offsets, simulate_execution

BASE = 0x400000

KINDS = (
    BranchKind.DIRECT_UNCONDITIONAL,
    BranchKind.DIRECT_CONDITIONAL,
    BranchKind.INDIRECT_CALL,
    BranchKind.INDIRECT_JUMP,
    BranchKind.RETURN,
)
TERMINATOR_BYTES = {
    BranchKind.DIRECT_UNCONDITIONAL: b"\xe9\x00\x00\x00\x00",
    BranchKind.DIRECT_CONDITIONAL: b"\x0f\x84\x00\x00\x00\x00",
    BranchKind.INDIRECT_CALL: b"\xff\xd0",
    BranchKind.INDIRECT_JUMP: b"\xff\xe0",
    BranchKind.RETURN: b"\xc3",
}


def listing_line(address: int, hex_bytes: str, mnemonic: str, operands: str = "", **extra) -> str:
    record = {"addr": address, "bytes": hex_bytes, "mn": mnemonic}
    if operands:
        record["ops"] = operands
    record.update(extra)
    return json.dumps(record)


def gadget(gadget_id: int, kind: BranchKind, start: int | None = None, target: int | None = None) -> Gadget:
    raw = b"\x48\x89\xe5" + TERMINATOR_BYTES[kind]
    return Gadget(
        id=gadget_id,
        start=gadget_id * 16 if start is None else start,
        raw=raw,
        terminator=kind,
        direct_target=target,
        instruction_count=2,
    )


def graph_from_edges(kinds: list[BranchKind], pairs: list[tuple[int, int]]) -> Cfg:
    gadgets = [gadget(index, kind) for index, kind in enumerate(kinds)]
    return Cfg(gadgets, [(src, dst, EdgeOrigin.TRACE_WITNESSED) for src, dst in pairs], base=BASE)


@pytest.fixture
def random_cfg() -> Callable[[np.random.Generator, int, float], Cfg]:
    def _make(rng: np.random.Generator, node_count: int, edge_probability: float) -> Cfg:
        kinds = [KINDS[int(rng.integers(len(KINDS)))] for _ in range(node_count)]
        pairs = [
            (src, dst)
            for src in range(node_count)
            for dst in range(node_count)
            if rng.random() < edge_probability
        ]
        return graph_from_edges(kinds, pairs)

    return _make


@pytest.fixture
def program() -> SyntheticProgram:
    return generate_program(80, seed=11, base=BASE)


@pytest.fixture
def program_cfg(program: SyntheticProgram) -> Cfg:
    segmentation = segment_gadgets(parse_listing(program.listing_text()))
    return build_static_cfg(segmentation.gadgets, program.base)


@pytest.fixture
def truth_successors(program: SyntheticProgram, program_cfg: Cfg) -> dict[int, tuple[int, ...]]:
    return indirect_successors_from_offsets(program_cfg, program.indirect_targets)


@pytest.fixture
def simulation(program_cfg: Cfg, truth_successors: dict[int, tuple[int, ...]]) -> Simulation:
    return simulate_execution(program_cfg, BASE, 3000, seed=5, indirect_successors=truth_successors, strict=True)


@pytest.fixture
def table(program_cfg: Cfg) -> OffsetTable:
    return build_offset_table(program_cfg, 16)


@pytest.fixture
def refined_cfg(program_cfg: Cfg, simulation: Simulation, table: OffsetTable) -> Cfg:
    return refine_cfg(program_cfg, simulation.header, simulation.events, table)
