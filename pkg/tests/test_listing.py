from __future__ import annotations

import numpy as np
import pytest

from cfiguard.listing import (
    EmptyListing,
    MalformedLine,
    NonMonotonicAddress,
    OverlongInstruction,
    classify_branch,
    parse_listing,
    segment_gadgets,
)
from cfiguard.models import BranchKind

from conftest import listing_line


def test_parse_single_return():
    listing = parse_listing('{"addr":4096,"bytes":"c3","mn":"ret"}')

    assert len(listing) == 1
    instruction = listing[0]
    assert instruction.address == 4096
    assert instruction.raw == b"\xc3"
    assert instruction.branch is BranchKind.RETURN
    assert instruction.target is None


def test_hex_address_and_comments():
    document = "\n".join(
        [
            "# produced by hand",
            listing_line("0x401000", "4889e5", "mov", "rbp, rsp"),
            "",
            listing_line("0x401003", "e9f8ffffff", "jmp", "0x401000"),
        ]
    )
    listing = parse_listing(document)

    assert [instruction.address for instruction in listing] == [0x401000, 0x401003]
    assert listing[1].branch is BranchKind.DIRECT_UNCONDITIONAL
    assert listing[1].target == 0x401000


def test_bad_hex_grouping_is_malformed():
    with pytest.raises(MalformedLine) as excinfo:
        parse_listing(listing_line(4096, "5548 89f5", "push", "rbp"))
    assert excinfo.value.line_number == 1


def test_uppercase_hex_is_malformed():
    with pytest.raises(MalformedLine):
        parse_listing(listing_line(4096, "C3", "ret"))


def test_decreasing_address():
    document = "\n".join([listing_line(4096, "c3", "ret"), listing_line(4090, "c3", "ret")])
    with pytest.raises(NonMonotonicAddress) as excinfo:
        parse_listing(document)
    assert excinfo.value.line_number == 2


def test_overlapping_instruction():
    document = "\n".join([listing_line(4096, "4889e5", "mov", "rbp, rsp"), listing_line(4097, "c3", "ret")])
    with pytest.raises(MalformedLine):
        parse_listing(document)


def test_overlong_instruction():
    with pytest.raises(OverlongInstruction) as excinfo:
        parse_listing(listing_line(4096, "90" * 16, "nop"))
    assert excinfo.value.length == 16


def test_direct_branch_needs_target():
    with pytest.raises(MalformedLine):
        parse_listing(listing_line(4096, "7400", "je"))


def test_target_on_indirect_branch_rejected():
    with pytest.raises(MalformedLine):
        parse_listing(listing_line(4096, "ffd0", "call", "rax", target=8192))


def test_explicit_target_makes_bare_jump_direct():
    listing = parse_listing(listing_line(4096, "eb00", "jmp", target=4098))
    assert listing[0].branch is BranchKind.DIRECT_UNCONDITIONAL
    assert listing[0].target == 4098


@pytest.mark.parametrize(
    ("mnemonic", "operands", "expected"),
    [
        ("ret", "", BranchKind.RETURN),
        ("retq", "", BranchKind.RETURN),
        ("bnd ret", "", BranchKind.RETURN),
        ("jmp", "0x401000", BranchKind.DIRECT_UNCONDITIONAL),
        ("call", "0x401000 <memcpy>", BranchKind.DIRECT_UNCONDITIONAL),
        ("call", "rax", BranchKind.INDIRECT_CALL),
        ("callq", "*0x8(%rax)", BranchKind.INDIRECT_CALL),
        ("jmp", "qword ptr [rax + 8]", BranchKind.INDIRECT_JUMP),
        ("notrack jmp", "rax", BranchKind.INDIRECT_JUMP),
        ("je", "0x10", BranchKind.DIRECT_CONDITIONAL),
        ("loop", "0x10", BranchKind.DIRECT_CONDITIONAL),
        ("mov", "rbp, rsp", BranchKind.NONE),
        ("syscall", "", BranchKind.NONE),
    ],
)
def test_classify_branch(mnemonic, operands, expected):
    assert classify_branch(mnemonic, operands) is expected


def test_segment_definition_example():
    document = "\n".join(
        [
            listing_line(0, "4889e5", "mov", "rbp, rsp"),
            listing_line(3, "53", "push", "rbx"),
            listing_line(4, "c3", "ret"),
            listing_line(5, "5b", "pop", "rbx"),
            listing_line(6, "e900000000", "jmp", "0xb"),
        ]
    )
    segmentation = segment_gadgets(parse_listing(document))

    assert len(segmentation.gadgets) == 2
    first, second = segmentation.gadgets
    assert (first.start, first.raw, first.terminator) == (0, bytes.fromhex("4889e553c3"), BranchKind.RETURN)
    assert (second.start, second.raw, second.terminator) == (5, bytes.fromhex("5be900000000"), BranchKind.DIRECT_UNCONDITIONAL)
    assert second.direct_target == 0xB
    assert segmentation.dropped_instructions == 0


def test_segment_back_to_back_returns():
    document = "\n".join([listing_line(0, "c3", "ret"), listing_line(1, "c3", "ret")])
    gadgets = segment_gadgets(parse_listing(document)).gadgets
    assert [(g.start, g.raw) for g in gadgets] == [(0, b"\xc3"), (1, b"\xc3")]


def test_section_break_drops_tail():
    document = "\n".join(
        [
            listing_line(0, "53", "push", "rbx"),
            listing_line(1, "c3", "ret"),
            listing_line(2, "5b", "pop", "rbx"),
            # gap: a new section starts here
            listing_line(0x100, "5b", "pop", "rbx"),
            listing_line(0x101, "c3", "ret"),
            listing_line(0x102, "90", "nop"),
        ]
    )
    segmentation = segment_gadgets(parse_listing(document))

    assert [g.start for g in segmentation.gadgets] == [0, 0x100]
    assert segmentation.dropped_instructions == 2
    assert segmentation.section_count == 2


def test_empty_listing():
    with pytest.raises(EmptyListing):
        segment_gadgets(parse_listing("# nothing here\n"))


def test_random_listing_against_linear_scan():
    rng = np.random.default_rng(37)
    branch_positions = set(int(i) for i in rng.choice(200, size=37, replace=False))
    lines = []
    address = 0x1000
    expected_bytes = b""
    for index in range(200):
        if index in branch_positions:
            hex_bytes, mnemonic, operands = ("c3", "ret", "") if index % 2 else ("ffe0", "jmp", "rax")
        else:
            hex_bytes, mnemonic, operands = ("4801d8", "add", "rax, rbx")
        lines.append(listing_line(address, hex_bytes, mnemonic, operands))
        address += len(hex_bytes) // 2
        expected_bytes += bytes.fromhex(hex_bytes)

    listing = parse_listing("\n".join(lines))
    segmentation = segment_gadgets(listing)

    # Independent one-pass count of branch terminators.
    oracle = sum(1 for instruction in listing if instruction.branch.is_branch)
    assert oracle == 37
    assert len(segmentation.gadgets) == 37
    tail = b"".join(instruction.raw for instruction in listing.instructions[max(branch_positions) + 1 :])
    assert b"".join(g.raw for g in segmentation.gadgets) + tail == expected_bytes
    assert segmentation.dropped_instructions == 199 - max(branch_positions)
    assert all(g.terminator.is_branch for g in segmentation.gadgets)
