"""Domain-model tests: workload generation, forest construction, packs."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixpack import (
    BlockTable,
    CtaPack,
    InvalidSpec,
    Partition,
    WorkloadSpec,
    assemble_partition,
    build_forest,
    flatten_forest,
    generate_workload,
    validate_partition,
)
from prefixpack.errors import CoverageGap

from helpers import random_table


def make_spec(b, lengths, **kw):
    return WorkloadSpec(level_counts=tuple(b), level_lengths=tuple(lengths), **kw)


class TestWorkloadSpec:
    def test_valid_roundtrip_json(self):
        spec = make_spec([1, 4, 16], [128, 256, 1024])
        doc = spec.to_json()
        assert doc["B"] == [1, 4, 16]
        assert doc["heads"] == {"q": 32, "kv": 8, "dim": 128}
        assert WorkloadSpec.from_json(doc) == spec

    @pytest.mark.parametrize(
        "b,lengths",
        [
            ([1, 3], [16]),            # length mismatch
            ([2, 3], [16, 16]),        # 2 does not divide 3
            ([0, 4], [16, 16]),        # non-positive count
            ([1], [10]),               # not a block multiple
            ([1], [0]),                # zero total KV
            ([1], [-16]),              # negative
        ],
    )
    def test_invalid_specs(self, b, lengths):
        with pytest.raises(InvalidSpec):
            make_spec(b, lengths).validate()

    def test_gqa_head_constraint(self):
        with pytest.raises(InvalidSpec):
            make_spec([1], [16], num_heads=30, num_kv_heads=8).validate()


class TestGenerateWorkload:
    def test_single_query(self):
        table = generate_workload(make_spec([1], [128]))
        assert table.num_queries == 1
        assert table.rows[0] == list(range(8))
        assert len(set(table.rows[0])) == 8

    def test_two_level_paper_shape(self):
        # B=[1,4,16], L=[128,256,1024]: all rows share the first 8 blocks,
        # groups of 4 share the next 16, then 64 unique blocks per row.
        table = generate_workload(make_spec([1, 4, 16], [128, 256, 1024]))
        assert table.num_queries == 16
        first8 = table.rows[0][:8]
        assert all(row[:8] == first8 for row in table.rows)
        for g in range(4):
            group = table.rows[4 * g: 4 * g + 4]
            mid = group[0][8:24]
            assert all(row[8:24] == mid for row in group)
        tails = [tuple(row[24:]) for row in table.rows]
        assert all(len(t) == 64 for t in tails)
        assert len(set(b for t in tails for b in t)) == 16 * 64

    def test_disjoint_trees(self):
        table = generate_workload(make_spec([2, 4], [64, 64]))
        assert table.num_queries == 4
        assert table.rows[0][:4] == table.rows[1][:4]
        assert table.rows[2][:4] == table.rows[3][:4]
        assert set(table.rows[0][:4]).isdisjoint(table.rows[2][:4])

    def test_deterministic(self):
        spec = make_spec([1, 4, 16], [128, 256, 1024])
        a = generate_workload(spec, seed=3)
        b = generate_workload(spec, seed=3)
        assert a.rows == b.rows
        assert a.fingerprint() == b.fingerprint()

    def test_zero_middle_level(self):
        table = generate_workload(make_spec([1, 2, 4], [32, 0, 16]))
        assert all(len(row) == 3 for row in table.rows)


class TestBlockTable:
    def test_validation(self):
        with pytest.raises(InvalidSpec):
            BlockTable(rows=[[1, 1]], valid_tokens_last_block=[16], block_size=16).validate()
        with pytest.raises(InvalidSpec):
            BlockTable(rows=[[]], valid_tokens_last_block=[16], block_size=16).validate()
        with pytest.raises(InvalidSpec):
            BlockTable(rows=[[1]], valid_tokens_last_block=[0], block_size=16).validate()

    def test_kv_len_partial_last_block(self):
        table = BlockTable(rows=[[0, 1, 2]], valid_tokens_last_block=[5], block_size=16)
        assert table.kv_len(0) == 37
        assert table.row_units(0)[-1] == (2, 5)

    def test_json_roundtrip(self):
        table = generate_workload(make_spec([1, 2], [32, 16]))
        doc = table.to_json()
        assert set(doc) == {"rows", "valid_tokens_last_block"}
        again = BlockTable.from_json(doc, block_size=16)
        assert again.rows == table.rows
        assert again.fingerprint() == table.fingerprint()

    def test_fingerprint_sensitivity(self):
        table = generate_workload(make_spec([1, 2], [32, 16]))
        base = table.fingerprint()
        mutated = BlockTable(
            rows=[list(r) for r in table.rows],
            valid_tokens_last_block=list(table.valid_tokens_last_block),
            block_size=table.block_size,
        )
        mutated.rows[1].append(999)
        assert mutated.fingerprint() != base
        shuffled = BlockTable(
            rows=[table.rows[1], table.rows[0]],
            valid_tokens_last_block=list(table.valid_tokens_last_block),
            block_size=table.block_size,
        )
        assert shuffled.fingerprint() != base  # order-sensitive


class TestBuildForest:
    def test_single_row_is_leaf_root(self):
        table = generate_workload(make_spec([1], [128]))
        forest = build_forest(table)
        assert len(forest.roots) == 1
        root = forest.roots[0]
        assert root.is_leaf and root.query_ids == (0,)
        assert root.token_len == 128 and len(root.block_ids) == 8

    def test_identical_rows_share_everything(self):
        table = BlockTable(rows=[[0, 1], [0, 1]], valid_tokens_last_block=[16, 16], block_size=16)
        forest = build_forest(table)
        root = forest.roots[0]
        assert root.num_queries == 2 and root.token_len == 32
        assert len(root.children) == 2
        assert all(c.is_leaf and c.token_len == 0 for c in root.children)

    def test_paper_tree_shape(self):
        table = generate_workload(make_spec([1, 4, 16], [128, 256, 1024]))
        forest = build_forest(table)
        assert len(forest.roots) == 1
        root = forest.roots[0]
        assert (root.token_len, root.num_queries) == (128, 16)
        assert len(root.children) == 4
        for child in root.children:
            assert (child.token_len, child.num_queries) == (256, 4)
            assert len(child.children) == 4
            for leaf in child.children:
                assert leaf.is_leaf and leaf.token_len == 1024

    def test_partial_block_not_shared_across_different_fill(self):
        # same trailing block ID but different valid counts: not a shared unit
        table = BlockTable(
            rows=[[0, 1], [0, 1]], valid_tokens_last_block=[16, 8], block_size=16
        )
        forest = build_forest(table)
        root = forest.roots[0]
        assert root.token_len == 16  # only block 0 is truly shared
        assert sorted(c.token_len for c in root.children) == [8, 16]

    def test_sibling_first_blocks_distinct(self):
        rng = random.Random(5)
        for _ in range(20):
            _, table = random_table(rng, max_queries=16)
            forest = build_forest(table)
            for node in forest.iter_nodes():
                firsts = [c.block_ids[0] for c in node.children if c.block_ids]
                assert len(firsts) == len(set(firsts))

    def test_roundtrip_random_tables(self):
        rng = random.Random(11)
        for _ in range(50):
            _, table = random_table(rng, max_queries=32)
            rows = flatten_forest(build_forest(table))
            assert rows == {q: table.rows[q] for q in range(table.num_queries)}

    def test_node_count_bound(self):
        rng = random.Random(13)
        for _ in range(30):
            spec, table = random_table(rng, max_queries=32)
            forest = build_forest(table)
            levels = len(spec.level_counts)
            assert forest.node_count <= 2 * table.num_queries * (levels + 1)

    def test_subtree_query_counts_consistent(self):
        _, table = random_table(random.Random(17), max_queries=24)
        forest = build_forest(table)
        for node in forest.iter_nodes():
            assert node.num_queries == len(node.subtree_queries())


@settings(max_examples=40, deadline=None)
@given(
    fan1=st.integers(1, 4),
    fan2=st.integers(1, 4),
    blocks=st.lists(st.integers(1, 6), min_size=2, max_size=2),
    seed=st.integers(0, 99),
)
def test_forest_roundtrip_property(fan1, fan2, blocks, seed):
    spec = WorkloadSpec(
        level_counts=(fan1, fan1 * fan2),
        level_lengths=(blocks[0] * 16, blocks[1] * 16),
    )
    table = generate_workload(spec, seed)
    rows = flatten_forest(build_forest(table))
    assert rows == {q: table.rows[q] for q in range(table.num_queries)}


class TestPacksAndPartition:
    def test_pack_invariants(self):
        with pytest.raises(InvalidSpec):
            CtaPack(query_ids=(), block_ids=(0,), kv_len=16)
        with pytest.raises(InvalidSpec):
            CtaPack(query_ids=(0,), block_ids=(), kv_len=0)

    def test_partition_json_roundtrip(self):
        table = generate_workload(make_spec([1, 2], [32, 16]))
        packs = [
            CtaPack(query_ids=(0, 1), block_ids=(0, 1), kv_len=32),
            CtaPack(query_ids=(0,), block_ids=(2,), kv_len=16),
            CtaPack(query_ids=(1,), block_ids=(3,), kv_len=16),
        ]
        partition = assemble_partition(packs, table)
        assert all(p.produces_partial for p in partition.packs)  # every query spans two packs
        doc = partition.to_json()
        assert doc["packs"][0] == {"queries": [0, 1], "blocks": [0, 1], "kv_len": 32}
        again = Partition.from_json(doc)
        assert again.source_fingerprint == partition.source_fingerprint
        assert [(p.query_ids, p.block_ids, p.kv_len) for p in again.packs] == [
            (p.query_ids, p.block_ids, p.kv_len) for p in partition.packs
        ]

    def test_validate_partition_catches_gap_and_overlap(self):
        table = generate_workload(make_spec([1, 2], [32, 16]))
        good = [
            CtaPack(query_ids=(0, 1), block_ids=(0, 1), kv_len=32),
            CtaPack(query_ids=(0,), block_ids=(2,), kv_len=16),
            CtaPack(query_ids=(1,), block_ids=(3,), kv_len=16),
        ]
        validate_partition(assemble_partition(good, table), table)
        gap = assemble_partition(good[:2], table)
        with pytest.raises(CoverageGap):
            validate_partition(gap, table)
        overlap = assemble_partition(good + [good[1]], table)
        with pytest.raises(CoverageGap):
            validate_partition(overlap, table)
