from __future__ import annotations

import pytest

from cfiguard.errors import ConfigError, DataError
from cfiguard.models import BranchKind, Tip
from cfiguard.payloads import (
    VARIANTS,
    NoHijackPoint,
    NoPayloadGadgets,
    PayloadRecord,
    generate_payloads,
    read_manifest,
    tip_sources,
    write_manifest,
)

from conftest import graph_from_edges


@pytest.fixture
def sources(refined_cfg, simulation):
    return tip_sources(refined_cfg, simulation.header, simulation.events)


def test_tip_sources_point_at_indirect_gadgets(refined_cfg, simulation, sources):
    tip_indexes = [index for index, event in enumerate(simulation.events) if isinstance(event, Tip)]

    assert [index for index, _ in sources] == tip_indexes
    assert all(refined_cfg.node(source).terminator.is_indirect for _, source in sources)


def test_payload_shape(refined_cfg, sources):
    edges = refined_cfg.edge_pairs()
    owners = dict(sources)

    payloads = generate_payloads(refined_cfg, sources, 64, seed=1)

    assert len(payloads) == 64
    assert len({(p.hijack_point, p.gadgets) for p in payloads}) == 64
    for payload in payloads:
        assert 3 <= len(payload.gadgets) <= 6
        assert payload.variant in VARIANTS
        assert (owners[payload.hijack_point], payload.gadgets[0]) not in edges
        assert all(refined_cfg.node(gadget).terminator.is_indirect for gadget in payload.gadgets)


def test_variants_stay_close_to_their_family(refined_cfg, sources):
    payloads = generate_payloads(refined_cfg, sources, 64, seed=1)
    bases = {p.family: p for p in payloads if p.variant == "base"}

    assert {p.variant for p in payloads} > {"base"}
    for payload in payloads:
        base = bases[payload.family]
        assert payload.hijack_point == base.hijack_point
        assert payload.gadgets[0] == base.gadgets[0]
        assert len(payload.gadgets) == len(base.gadgets)
        if payload.variant == "swap":
            assert sorted(payload.gadgets) == sorted(base.gadgets)
        if payload.variant == "substitute":
            changed = [i for i, (a, b) in enumerate(zip(base.gadgets, payload.gadgets)) if a != b]
            assert len(changed) == 1
            position = changed[0]
            assert (
                refined_cfg.node(payload.gadgets[position]).terminator
                is refined_cfg.node(base.gadgets[position]).terminator
            )


def test_generation_is_seeded(refined_cfg, sources):
    assert generate_payloads(refined_cfg, sources, 20, seed=4) == generate_payloads(refined_cfg, sources, 20, seed=4)
    assert generate_payloads(refined_cfg, sources, 20, seed=4) != generate_payloads(refined_cfg, sources, 20, seed=5)


def test_zero_count(refined_cfg):
    assert generate_payloads(refined_cfg, [], 0, seed=0) == []


def test_no_hijack_point(refined_cfg):
    with pytest.raises(NoHijackPoint):
        generate_payloads(refined_cfg, [], 5, seed=0)


def test_too_few_indirect_gadgets():
    cfg = graph_from_edges([BranchKind.RETURN, BranchKind.DIRECT_UNCONDITIONAL, BranchKind.DIRECT_UNCONDITIONAL], [])
    with pytest.raises(NoPayloadGadgets):
        generate_payloads(cfg, [(0, 0)], 5, seed=0)


@pytest.mark.parametrize(("count", "min_len", "max_len"), [(-1, 3, 6), (5, 1, 6), (5, 4, 3)])
def test_invalid_arguments(refined_cfg, sources, count, min_len, max_len):
    with pytest.raises(ConfigError):
        generate_payloads(refined_cfg, sources, count, seed=0, min_len=min_len, max_len=max_len)


def test_manifest_round_trip(tmp_path, refined_cfg, sources):
    payloads = generate_payloads(refined_cfg, sources, 8, seed=3)
    records = [PayloadRecord(p, f"attack_{i:03d}.dctr", "benign.dctr") for i, p in enumerate(payloads)]
    path = tmp_path / "manifest.jsonl"

    write_manifest(path, records)

    assert read_manifest(path) == records
    assert len(path.read_text(encoding="utf-8").splitlines()) == 8


def test_manifest_rejects_bad_line(tmp_path):
    path = tmp_path / "manifest.jsonl"
    path.write_text('{"gadgets": [1, 2]}\n', encoding="utf-8")
    with pytest.raises(DataError):
        read_manifest(path)
