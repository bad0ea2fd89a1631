from __future__ import annotations

import pytest

from cfiguard.errors import ConfigError, DataError
from cfiguard.listing import parse_listing, segment_gadgets
from cfiguard.models import BranchKind
from cfiguard.synthetic import GADGET_BUDGET, generate_program, read_truth, write_truth

from conftest import BASE


def test_generation_is_deterministic():
    first = generate_program(200, seed=3)
    second = generate_program(200, seed=3)
    other = generate_program(200, seed=4)

    assert first.listing_text() == second.listing_text()
    assert first.indirect_targets == second.indirect_targets
    assert first.listing_text() != other.listing_text()


def test_listing_segments_into_whole_gadgets(program):
    segmentation = segment_gadgets(parse_listing(program.listing_text()))

    assert len(segmentation.gadgets) == program.gadget_count >= 80
    assert segmentation.dropped_instructions == 0
    assert segmentation.gadgets[0].start == program.entry_address
    assert all(len(gadget.raw) <= GADGET_BUDGET for gadget in segmentation.gadgets)


def test_truth_covers_every_indirect_gadget(program, program_cfg):
    indirect = {gadget.start for gadget in program_cfg.nodes if gadget.terminator.is_indirect}

    assert set(program.indirect_targets) == indirect
    for targets in program.indirect_targets.values():
        assert targets
        assert all(program_cfg.node_at_offset(offset) is not None for offset in targets)


def test_returns_land_after_call_sites(program, program_cfg):
    for source, targets in program.indirect_targets.items():
        if program_cfg.node_at_offset(source).terminator is not BranchKind.RETURN:
            continue
        for offset in targets:
            site = program_cfg.containing_offset(offset - 1)
            assert site is not None
            assert site.end == offset
            assert site.terminator in (BranchKind.DIRECT_UNCONDITIONAL, BranchKind.INDIRECT_CALL)


def test_class_count_grows_with_size():
    assert generate_program(64, seed=0).class_count == 1
    assert generate_program(640, seed=0).class_count == 10


def test_truth_file_round_trip(tmp_path, program):
    path = tmp_path / "program.truth"
    write_truth(path, program.indirect_targets)

    assert read_truth(path) == program.indirect_targets


def test_truth_file_rejects_bad_line(tmp_path):
    path = tmp_path / "program.truth"
    path.write_text("0x10 0x20\n0x30\n", encoding="utf-8")

    with pytest.raises(DataError):
        read_truth(path)


@pytest.mark.parametrize(("min_gadgets", "base"), [(0, BASE), (10, BASE + 3), (10, -16)])
def test_invalid_arguments(min_gadgets, base):
    with pytest.raises(ConfigError):
        generate_program(min_gadgets, seed=0, base=base)
