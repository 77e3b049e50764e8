"""Memory-profit model and the tree packer that turns a block table into CTAs.

Packing a shared-prefix node of ``s`` queries and ``l`` tokens into one CTA
loads the span once instead of ``s`` times, saving ``(s-1)*l*d`` element
loads, at the cost of per-query partial write/read round trips.  The packer
walks the prefix forest top-down and, per child, either splits it into its
own CTA or merges the parent span into the child's packs, choosing whichever
saves more modeled global-memory traffic.
"""

from __future__ import annotations

import threading
from concurrent.futures import Executor, Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import InvalidChildIndex
from .workload import (
    BlockTable,
    CtaPack,
    Partition,
    PrefixForest,
    PrefixNode,
    assemble_partition,
    build_forest,
)


@dataclass(frozen=True)
class ProfitModel:
    """Profit/overhead bookkeeping constants; everything is expressed in
    head-dim element counts, so dtype and head-count weights cancel in every
    comparison."""

    head_dim: int

    def __post_init__(self):
        if self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")


@dataclass(frozen=True)
class IntraNodeProfit:
    profit_elems: int
    overhead_elems: int
    ratio: float


def intra_node_profit(s: int, l: int, d: int) -> IntraNodeProfit:
    """Element-count profit of packing ``s`` queries sharing ``l`` tokens.

    Saved loads are ``(s-1)*l*d``; the intermediate write/read overhead is
    ``8*s*d`` (two round trips per query at double-width intermediates,
    folded into the factor 8).
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    if l < 0:
        raise ValueError("l must be >= 0")
    profit = (s - 1) * l * d
    overhead = 8 * s * d
    ratio = profit / overhead if overhead else 0.0
    return IntraNodeProfit(profit_elems=profit, overhead_elems=overhead, ratio=ratio)


@dataclass(frozen=True)
class SchemeComparison:
    scheme1_profit: int
    scheme2_profit: Optional[int]
    delta: Optional[int]


def scheme_profits(
    l_u: int,
    s_u: int,
    children: Sequence[tuple[int, int]],
    merge_child_index: Optional[int],
    d: int,
) -> SchemeComparison:
    """Compare splitting every child into its own CTA (scheme 1) against
    merging one child's packs with the parent span (scheme 2).

    ``children`` is a list of ``(l_i, s_i)``.  The incremental profit of the
    merge is ``4*s_i*d - l_u*d``: it depends only on the merged child's query
    count and the parent span length.
    """
    if s_u != sum(s for _, s in children):
        raise ValueError("parent query count must equal the sum over children")
    scheme1 = (s_u - 1) * l_u * d - 4 * s_u * d + sum((s - 1) * l * d for l, s in children)
    if merge_child_index is None:
        return SchemeComparison(scheme1_profit=scheme1, scheme2_profit=None, delta=None)
    if not (0 <= merge_child_index < len(children)):
        raise InvalidChildIndex(f"merge_child_index {merge_child_index} out of range")
    l_i, s_i = children[merge_child_index]
    scheme2 = (
        (s_u - s_i - 1) * l_u * d
        - 4 * (s_u - s_i) * d
        + sum((s - 1) * l * d for k, (l, s) in enumerate(children) if k != merge_child_index)
        + (s_i - 1) * (l_u + l_i) * d
    )
    return SchemeComparison(scheme1_profit=scheme1, scheme2_profit=scheme2, delta=scheme2 - scheme1)


def _terminal_queries(node: PrefixNode) -> int:
    """Queries whose KV ends exactly at ``node``'s run: the node itself when
    it is a leaf, otherwise its empty-suffix leaf children."""
    if node.is_leaf:
        return 1
    return sum(1 for c in node.children if c.is_leaf and c.token_len == 0)


def _fuse_chain(node: PrefixNode, blocks: tuple[int, ...], span: int):
    """Collapse degenerate single-query chains so no zero-profit pack is
    emitted for an internal node with s == 1."""
    while not node.is_leaf and node.num_queries == 1:
        child = node.children[0]
        blocks = blocks + child.block_ids
        span += child.token_len
        node = child
    return node, blocks, span


def tree_heuristic(
    root: PrefixNode,
    inherited_blocks: Sequence[int] | None = None,
    inherited_tokens: int | None = None,
) -> list[CtaPack]:
    """Pack one prefix tree into CTAs, top-down.

    ``inherited_blocks`` is the KV span the current node packs (its own run,
    plus any parent runs absorbed along a merge chain).  For each child the
    merge saves one partial round trip per query, plus a second one for
    queries whose KV ends inside the child, and costs one extra load of the
    current span; the child is merged when the savings win strictly.  For a
    child whose queries all terminate in it this reduces to merging exactly
    when ``4 * s_child > span``, with ties split.
    """
    blocks = tuple(inherited_blocks) if inherited_blocks is not None else root.block_ids
    span = inherited_tokens if inherited_tokens is not None else root.token_len
    root, blocks, span = _fuse_chain(root, blocks, span)

    if root.is_leaf:
        if span == 0:
            return []
        return [CtaPack(query_ids=root.query_ids, block_ids=blocks, kv_len=span)]

    packs: list[CtaPack] = []
    merged_away: set[int] = set()
    for child in root.children:
        if child.is_leaf and child.token_len == 0:
            continue  # nothing beyond the shared span; stays in this node's pack
        if 2 * (child.num_queries + _terminal_queries(child)) > span:
            packs.extend(tree_heuristic(child, blocks + child.block_ids, span + child.token_len))
            merged_away.update(child.subtree_queries())
        else:
            packs.extend(tree_heuristic(child, child.block_ids, child.token_len))
    remaining = tuple(q for q in root.subtree_queries() if q not in merged_away)
    if remaining and span > 0:
        packs.append(CtaPack(query_ids=remaining, block_ids=blocks, kv_len=span))
    return packs


def pack_forest(forest: PrefixForest) -> list[CtaPack]:
    packs: list[CtaPack] = []
    for root in forest.roots:
        packs.extend(tree_heuristic(root))
    return packs


def naive_per_node(table: BlockTable) -> Partition:
    """Ablation baseline: every forest node becomes one CTA over its own run,
    ignoring the intermediate-traffic cost of the extra splits."""
    forest = build_forest(table)
    packs: list[CtaPack] = []
    for node in forest.iter_nodes():
        if node.token_len == 0:
            continue
        packs.append(
            CtaPack(
                query_ids=tuple(node.subtree_queries()),
                block_ids=node.block_ids,
                kv_len=node.token_len,
            )
        )
    return assemble_partition(packs, table)


class PackCache:
    """Single-slot schedule cache keyed by the block table fingerprint.

    Continuous batching leaves the table unchanged for many consecutive
    decode steps; the cached partition is reused until any row, valid-token
    count or the block size changes.  Reads take the lock briefly, so many
    threads may poll while one repacks.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._fingerprint: Optional[str] = None
        self._partition: Optional[Partition] = None
        self.hits = 0
        self.misses = 0

    def lookup(self, fingerprint: str) -> Optional[Partition]:
        with self._lock:
            if self._fingerprint == fingerprint and self._partition is not None:
                self.hits += 1
                return self._partition
            self.misses += 1
            return None

    def store(self, fingerprint: str, partition: Partition) -> None:
        with self._lock:
            self._fingerprint = fingerprint
            self._partition = partition

    @property
    def stats(self) -> dict:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses}


def pack_batch(table: BlockTable, cache: Optional[PackCache] = None) -> Partition:
    """Pack a decode batch, reusing the cached partition on a fingerprint hit.

    The miss path builds the prefix forest and packs each tree once, so its
    cost is linear in forest nodes and edges.
    """
    if table.num_queries == 0:
        empty = Partition(packs=(), source_fingerprint=table.fingerprint())
        return empty
    fingerprint = table.fingerprint()
    if cache is not None:
        hit = cache.lookup(fingerprint)
        if hit is not None:
            return hit
    forest = build_forest(table)
    partition = assemble_partition(pack_forest(forest), table)
    if cache is not None:
        cache.store(fingerprint, partition)
    return partition


def pack_batch_async(
    table: BlockTable,
    cache: Optional[PackCache] = None,
    executor: Optional[Executor] = None,
) -> Future:
    """Schedule packing on a worker so it overlaps pre-attention work; the
    consumer blocks on the returned future only when it needs the result."""
    if executor is None:
        executor = _default_executor()
    return executor.submit(pack_batch, table, cache)


_EXECUTOR: Optional[ThreadPoolExecutor] = None
_EXECUTOR_LOCK = threading.Lock()


def _default_executor() -> ThreadPoolExecutor:
    global _EXECUTOR
    with _EXECUTOR_LOCK:
        if _EXECUTOR is None:
            _EXECUTOR = ThreadPoolExecutor(max_workers=1, thread_name_prefix="pack")
        return _EXECUTOR
