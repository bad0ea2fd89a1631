from __future__ import annotations

import itertools

import numpy as np
import pytest

from cfiguard.chains import (
    ChainFormatError,
    ChainSet,
    InsufficientNodes,
    default_malicious_count,
    gen_malicious,
    is_malicious_shape,
    split_benign,
    split_cfg,
)
from cfiguard.models import BranchKind, ChainLabel

from conftest import graph_from_edges

R = BranchKind.RETURN
J = BranchKind.DIRECT_UNCONDITIONAL


def _brute_force_benign(cfg) -> set[tuple[int, ...]]:
    edges = cfg.edge_pairs()
    ids = range(len(cfg))
    found = set()
    for a, b in itertools.product(ids, repeat=2):
        if (a, b) not in edges:
            continue
        kind = cfg.node(a).terminator
        if kind.is_indirect:
            found.add((a, b))
        elif kind.is_direct:
            thirds = [c for c in ids if (b, c) in edges]
            found.update((a, b, c) for c in thirds)
            if not thirds:
                found.add((a, b))
    return found


def test_direct_path_forms_triple():
    # gadget1 -> gadget2 -> gadget3, gadget1 ends in a direct jump.
    cfg = graph_from_edges([J, J, R, R], [(0, 1), (1, 2)])
    chains = [chain.gadgets for chain in split_benign(cfg)]

    assert (0, 1, 2) in chains
    assert (1, 2) in chains


def test_indirect_edge_forms_pair():
    cfg = graph_from_edges([R, R], [(0, 1)])
    assert [chain.gadgets for chain in split_benign(cfg)] == [(0, 1)]


def test_empty_cfg_has_no_chains():
    assert split_benign(graph_from_edges([], [])) == []


def test_split_matches_brute_force(random_cfg):
    rng = np.random.default_rng(2020)
    for _ in range(200):
        cfg = random_cfg(rng, int(rng.integers(1, 21)), float(rng.uniform(0.02, 0.3)))
        chains = split_benign(cfg)

        assert {chain.gadgets for chain in chains} == _brute_force_benign(cfg)
        assert len(chains) == len({chain.gadgets for chain in chains})
        assert all(chain.label is ChainLabel.BENIGN for chain in chains)


def test_diverted_second_hop_is_malicious():
    # Real edge 3 -> 4, then 4 (a return) is diverted to 8.
    kinds = [R] * 9
    cfg = graph_from_edges(kinds, [(3, 4), (4, 5)])

    assert is_malicious_shape(cfg, (3, 4, 8), cfg.edge_pairs())
    assert not is_malicious_shape(cfg, (3, 4, 5), cfg.edge_pairs())


def test_realism_requires_indirect_violation():
    cfg = graph_from_edges([J, R, R], [(0, 1)])
    edges = cfg.edge_pairs()

    assert not is_malicious_shape(cfg, (0, 2), edges)
    assert is_malicious_shape(cfg, (0, 2), edges, realistic=False)
    assert is_malicious_shape(cfg, (1, 2), edges)


def test_complete_graph_is_exhausted():
    pairs = [(src, dst) for src in range(3) for dst in range(3)]
    cfg = graph_from_edges([R, R, R], pairs)

    chains, exhausted = gen_malicious(cfg, 10, seed=0)

    assert chains == []
    assert exhausted


def test_two_nodes_is_insufficient():
    with pytest.raises(InsufficientNodes):
        gen_malicious(graph_from_edges([R, R], []), 1, seed=0)


def test_exact_space_chains_are_unique_and_valid(random_cfg):
    rng = np.random.default_rng(8)
    cfg = random_cfg(rng, 12, 0.15)
    benign = split_benign(cfg)

    chains, exhausted = gen_malicious(cfg, 200, seed=1, benign=benign)

    edges = cfg.edge_pairs()
    assert not exhausted
    assert len(chains) == 200
    assert len({chain.gadgets for chain in chains}) == 200
    assert not {chain.gadgets for chain in chains} & {chain.gadgets for chain in benign}
    for chain in chains:
        assert chain.label is ChainLabel.MALICIOUS
        assert is_malicious_shape(cfg, chain.gadgets, edges)


def test_generation_is_seeded(random_cfg):
    cfg = random_cfg(np.random.default_rng(5), 15, 0.1)

    first, _ = gen_malicious(cfg, 50, seed=7)
    second, _ = gen_malicious(cfg, 50, seed=7)
    other, _ = gen_malicious(cfg, 50, seed=8)

    assert first == second
    assert first != other


def test_sampled_space_on_large_sparse_cfg(random_cfg):
    cfg = random_cfg(np.random.default_rng(500), 500, 0.004)
    edges = cfg.edge_pairs()

    chains, exhausted = gen_malicious(cfg, 10_000, seed=3)

    assert not exhausted
    assert len({chain.gadgets for chain in chains}) == 10_000
    for chain in chains:
        violated = [pair for pair in chain.pairs() if pair not in edges]
        assert violated
        assert all(cfg.node(src).terminator.is_indirect for src, _ in violated)


def test_pairs_can_be_excluded(random_cfg):
    cfg = random_cfg(np.random.default_rng(9), 10, 0.2)
    chains, _ = gen_malicious(cfg, 100, seed=0, include_pairs=False)
    assert all(len(chain.gadgets) == 3 for chain in chains)


def test_default_malicious_count():
    assert default_malicious_count(100) == 83
    assert default_malicious_count(201_097) == 166_911
    assert default_malicious_count(0) == 0


def test_split_cfg_and_chain_file(tmp_path, refined_cfg):
    chain_set = split_cfg(refined_cfg, seed=4)

    assert len(chain_set.malicious) == default_malicious_count(len(chain_set.benign))
    assert chain_set.cfg_hash == refined_cfg.digest
    assert not {c.gadgets for c in chain_set.benign} & {c.gadgets for c in chain_set.malicious}

    path = tmp_path / "chains.txt"
    chain_set.write(path)
    restored = ChainSet.read(path)
    assert restored.dumps() == chain_set.dumps()
    assert restored.digest == chain_set.digest
    assert split_cfg(refined_cfg, seed=4).digest == chain_set.digest


def test_chain_file_rejects_long_chain():
    with pytest.raises(ChainFormatError):
        ChainSet.loads("benign 1 2 3 4\n")


def test_benign_pairs_follow_the_pair_option():
    cfg = graph_from_edges([J, J, R, R], [(0, 1), (1, 2), (2, 3)])
    assert [chain.gadgets for chain in split_benign(cfg)] == [(0, 1, 2), (1, 2, 3), (2, 3)]
    assert [chain.gadgets for chain in split_benign(cfg, include_pairs=False)] == [(0, 1, 2), (1, 2, 3)]


@pytest.mark.parametrize("include_pairs", [True, False])
def test_both_labels_share_chain_lengths(refined_cfg, include_pairs):
    chain_set = split_cfg(refined_cfg, seed=1, include_pairs=include_pairs)

    benign_lengths = {len(chain.gadgets) for chain in chain_set.benign}
    malicious_lengths = {len(chain.gadgets) for chain in chain_set.malicious}

    assert benign_lengths == malicious_lengths == ({2, 3} if include_pairs else {3})
