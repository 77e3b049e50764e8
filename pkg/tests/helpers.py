"""Shared test utilities: random workload generation, an exhaustive
partition oracle, and independent re-implementations used as cross-checks.

The oracle enumerates every node-aligned partition of a prefix forest:
each query's root-to-leaf node path is cut into consecutive runs, and
queries with identical runs share one load of that run.  Grouping identical
runs never costs anything (it only removes duplicate loads), and cutting
inside a node's run only adds loads and round trips, so the minimum over
this family is the true optimum of the packing objective.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass

import numpy as np

from prefixpack import (
    BlockTable,
    WorkloadSpec,
    build_forest,
    generate_workload,
)
from prefixpack.simulator import intermediate_round_trip_bytes, kv_token_bytes

HEAD_CONFIGS = ((64, 8), (32, 8), (16, 8), (32, 32))


def random_spec(rng: random.Random, max_queries: int = 64, head_config=None, head_dim: int = 128) -> WorkloadSpec:
    """A small random multi-level workload with valid fan-outs."""
    levels = rng.randint(1, 3)
    counts = [rng.choice([1, 1, 2])]
    for _ in range(levels - 1):
        max_fan = max(1, max_queries // counts[-1])
        counts.append(counts[-1] * rng.randint(1, min(4, max_fan)))
    block_size = 16
    lengths = [block_size * rng.randint(1, 8) for _ in range(levels)]
    if rng.random() < 0.3 and levels > 1:
        lengths[rng.randint(0, levels - 2)] = 0
    heads = head_config if head_config is not None else rng.choice(HEAD_CONFIGS)
    return WorkloadSpec(
        level_counts=tuple(counts),
        level_lengths=tuple(lengths),
        block_size=block_size,
        num_heads=heads[0],
        num_kv_heads=heads[1],
        head_dim=head_dim,
        kv_dtype_bytes=2,
        intermediate_dtype_bytes=4,
    )


def random_table(rng: random.Random, **kwargs) -> tuple[WorkloadSpec, BlockTable]:
    spec = random_spec(rng, **kwargs)
    return spec, generate_workload(spec, seed=rng.randint(0, 10**6))


# ---------------------------------------------------------------------------
# Exhaustive partition oracle
# ---------------------------------------------------------------------------


@dataclass
class OracleResult:
    min_total_bytes: int
    partitions_scored: int


def brute_force_min_traffic(table: BlockTable, spec: WorkloadSpec) -> OracleResult:
    """Minimum modeled traffic over all node-aligned partitions.

    Scores every joint segmentation of the queries' node paths directly
    (identical runs share one KV load; a query cut into ``k >= 2`` runs pays
    ``k`` intermediate round trips).
    """
    forest = build_forest(table)
    node_ids: dict[int, int] = {}
    node_tokens: list[int] = []
    paths: dict[int, list[int]] = {}

    def walk(node, prefix):
        nid = node_ids.setdefault(id(node), len(node_ids))
        if nid == len(node_tokens):
            node_tokens.append(node.token_len)
        here = prefix + [nid] if node.token_len > 0 else prefix
        if node.is_leaf:
            for q in node.query_ids:
                paths[q] = here
        for child in node.children:
            walk(child, here)

    for root in forest.roots:
        walk(root, [])

    run_tokens: dict[tuple[int, ...], int] = {}

    def segmentations(path: list[int]) -> list[list[tuple[int, ...]]]:
        if not path:
            return [[]]
        options = []
        for cuts in itertools.product([False, True], repeat=len(path) - 1):
            runs = []
            start = 0
            for i, cut in enumerate(cuts, start=1):
                if cut:
                    runs.append(tuple(path[start:i]))
                    start = i
            runs.append(tuple(path[start:]))
            for run in runs:
                if run not in run_tokens:
                    run_tokens[run] = sum(node_tokens[n] for n in run)
            options.append(runs)
        return options

    per_query = [segmentations(paths[q]) for q in sorted(paths)]
    token_weight = kv_token_bytes(spec)
    round_trip = intermediate_round_trip_bytes(spec)

    best = None
    scored = 0
    for joint in itertools.product(*per_query):
        scored += 1
        distinct: set[tuple[int, ...]] = set()
        inter = 0
        for runs in joint:
            distinct.update(runs)
            if len(runs) >= 2:
                inter += len(runs) * round_trip
        kv = sum(run_tokens[r] for r in distinct)
        total = kv * token_weight + inter
        if best is None or total < best:
            best = total
    return OracleResult(min_total_bytes=best, partitions_scored=scored)


# ---------------------------------------------------------------------------
# Small-tree family used for exhaustive packing checks
# ---------------------------------------------------------------------------

LEVEL_TOKENS = (16, 32, 64, 128, 256)


def tree_family_tables(spec_template: WorkloadSpec):
    """Yield (description, BlockTable) over all trees with <= 6 queries and
    <= 3 levels, per-level lengths from LEVEL_TOKENS, plus zero-length leaf
    suffix variants (identical rows inside a group)."""
    bs = spec_template.block_size

    def table_from_rows(row_lengths: list[list[int]]) -> BlockTable:
        # row_lengths: per row, list of segment token lengths (shared prefixes
        # are expressed through identical leading segment ids below)
        next_block = 0
        segments: dict[tuple, list[int]] = {}

        def seg(key, tokens):
            nonlocal next_block
            if key not in segments:
                n = tokens // bs
                segments[key] = list(range(next_block, next_block + n))
                next_block += n
            return segments[key]

        rows = []
        for row in row_lengths:
            blocks: list[int] = []
            for key, tokens in row:
                blocks.extend(seg(key, tokens))
            rows.append(blocks)
        return BlockTable(
            rows=rows,
            valid_tokens_last_block=[bs] * len(rows),
            block_size=bs,
        )

    # single query, one level
    for l1 in LEVEL_TOKENS:
        yield f"single/{l1}", table_from_rows([[(("r",), l1)]])

    # two levels: root + k leaves
    for k in range(2, 7):
        for l1 in LEVEL_TOKENS:
            for l2 in (0,) + LEVEL_TOKENS:
                rows = []
                for j in range(k):
                    row = [(("r",), l1)]
                    if l2:
                        row.append((("leaf", j), l2))
                    rows.append(row)
                yield f"2lvl/k{k}/{l1}/{l2}", table_from_rows(rows)

    # three levels: root + children (partition of q) + leaf suffixes
    shapes = []
    for q in range(3, 7):
        for parts in _partitions(q):
            if len(parts) >= 2 and max(parts) >= 2:
                shapes.append(parts)
    for parts in shapes:
        for l1 in LEVEL_TOKENS:
            for l2 in LEVEL_TOKENS:
                for l3 in (0,) + LEVEL_TOKENS:
                    rows = []
                    for ci, size in enumerate(parts):
                        for j in range(size):
                            row = [(("r",), l1), (("c", ci), l2)]
                            if l3:
                                row.append((("leaf", ci, j), l3))
                            rows.append(row)
                    name = f"3lvl/{'-'.join(map(str, parts))}/{l1}/{l2}/{l3}"
                    yield name, table_from_rows(rows)


def _partitions(n: int, cap: int | None = None):
    if n == 0:
        yield ()
        return
    cap = cap or n
    for first in range(min(n, cap), 0, -1):
        for rest in _partitions(n - first, first):
            yield (first,) + rest


# ---------------------------------------------------------------------------
# Independent numeric oracle
# ---------------------------------------------------------------------------


def two_pass_attention(q: np.ndarray, keys, values, scale=None) -> np.ndarray:
    """Second attention implementation (scipy softmax) used as an oracle."""
    from scipy.special import softmax

    num_heads, d = q.shape[1], q.shape[2]
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    out = np.empty((q.shape[0], num_heads, d))
    for i in range(q.shape[0]):
        k, v = keys[i], values[i]
        group = num_heads // k.shape[1]
        for h in range(num_heads):
            kv_h = h // group
            scores = (k[:, kv_h, :].astype(np.float64) @ q[i, h].astype(np.float64)) * scale
            weights = softmax(scores)
            out[i, h] = weights @ v[:, kv_h, :].astype(np.float64)
    return out
