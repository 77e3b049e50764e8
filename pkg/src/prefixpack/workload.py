"""Core domain types: workload specs, block tables, prefix forests and packs.

A decode batch is described by per-level node counts ``B`` and per-level
token lengths ``L``: level ``i`` has ``B[i]`` nodes, each level-``i`` node
fans out into ``B[i+1] // B[i]`` children, and every level-``i`` node owns
``L[i]`` tokens of KV cache shared by all queries below it.  The last level
holds one leaf per query with that query's non-shared suffix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .errors import InvalidSpec


@dataclass(frozen=True)
class WorkloadSpec:
    """Shape of a synthetic decode batch plus model/layout constants."""

    level_counts: tuple[int, ...]
    level_lengths: tuple[int, ...]
    block_size: int = 16
    num_heads: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    kv_dtype_bytes: int = 2
    intermediate_dtype_bytes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "level_counts", tuple(self.level_counts))
        object.__setattr__(self, "level_lengths", tuple(self.level_lengths))

    @property
    def batch_size(self) -> int:
        return self.level_counts[-1]

    def validate(self) -> None:
        b, lengths = self.level_counts, self.level_lengths
        if len(b) == 0 or len(b) != len(lengths):
            raise InvalidSpec("level_counts and level_lengths must be equal-length and non-empty")
        if any(x <= 0 for x in b):
            raise InvalidSpec("level_counts entries must be positive")
        for prev, nxt in zip(b, b[1:]):
            if nxt % prev != 0:
                raise InvalidSpec(f"each level count must divide the next ({prev} !| {nxt})")
        if self.block_size <= 0:
            raise InvalidSpec("block_size must be positive")
        if any(x < 0 for x in lengths):
            raise InvalidSpec("level_lengths entries must be non-negative")
        if any(x % self.block_size != 0 for x in lengths):
            raise InvalidSpec("level_lengths must be multiples of block_size")
        if sum(lengths) == 0:
            raise InvalidSpec("workload has zero KV per query")
        if self.num_kv_heads <= 0 or self.num_heads % self.num_kv_heads != 0:
            raise InvalidSpec("num_heads must be a positive multiple of num_kv_heads")
        if self.head_dim <= 0:
            raise InvalidSpec("head_dim must be positive")
        if self.kv_dtype_bytes <= 0 or self.intermediate_dtype_bytes <= 0:
            raise InvalidSpec("dtype byte widths must be positive")

    def to_json(self) -> dict:
        return {
            "B": list(self.level_counts),
            "L": list(self.level_lengths),
            "block_size": self.block_size,
            "heads": {"q": self.num_heads, "kv": self.num_kv_heads, "dim": self.head_dim},
            "dtype_bytes": {"kv": self.kv_dtype_bytes, "intermediate": self.intermediate_dtype_bytes},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "WorkloadSpec":
        try:
            spec = cls(
                level_counts=tuple(doc["B"]),
                level_lengths=tuple(doc["L"]),
                block_size=int(doc.get("block_size", 16)),
                num_heads=int(doc["heads"]["q"]),
                num_kv_heads=int(doc["heads"]["kv"]),
                head_dim=int(doc["heads"]["dim"]),
                kv_dtype_bytes=int(doc["dtype_bytes"]["kv"]),
                intermediate_dtype_bytes=int(doc["dtype_bytes"]["intermediate"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"malformed workload spec: {exc}") from exc
        spec.validate()
        return spec


@dataclass
class BlockTable:
    """Per-query ordered KV block IDs, with a valid-token count for each
    row's final block (partially filled last blocks)."""

    rows: list[list[int]]
    valid_tokens_last_block: list[int]
    block_size: int

    @property
    def num_queries(self) -> int:
        return len(self.rows)

    def kv_len(self, query: int) -> int:
        """Valid tokens attended by ``query``."""
        row = self.rows[query]
        return (len(row) - 1) * self.block_size + self.valid_tokens_last_block[query]

    def row_units(self, query: int) -> list[tuple[int, int]]:
        """Row as (block_id, tokens_in_block) units; only the final unit may
        be partial."""
        row = self.rows[query]
        units = [(b, self.block_size) for b in row]
        if units:
            units[-1] = (row[-1], self.valid_tokens_last_block[query])
        return units

    def validate(self) -> None:
        if len(self.valid_tokens_last_block) != len(self.rows):
            raise InvalidSpec("valid_tokens_last_block must have one entry per row")
        if self.block_size <= 0:
            raise InvalidSpec("block_size must be positive")
        for i, row in enumerate(self.rows):
            if not row:
                raise InvalidSpec(f"row {i} is empty")
            if len(set(row)) != len(row):
                raise InvalidSpec(f"row {i} repeats a block ID")
            valid = self.valid_tokens_last_block[i]
            if not (1 <= valid <= self.block_size):
                raise InvalidSpec(f"row {i} valid-token count {valid} outside [1, block_size]")

    def fingerprint(self) -> str:
        """Order-sensitive content hash; any row/valid-token/block-size change
        produces a different digest."""
        h = hashlib.sha256()
        h.update(str(self.block_size).encode())
        for row, valid in zip(self.rows, self.valid_tokens_last_block):
            h.update(b"|")
            h.update(",".join(map(str, row)).encode())
            h.update(f";{valid}".encode())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {
            "rows": [list(r) for r in self.rows],
            "valid_tokens_last_block": list(self.valid_tokens_last_block),
        }

    @classmethod
    def from_json(cls, doc: dict, block_size: int) -> "BlockTable":
        table = cls(
            rows=[list(map(int, r)) for r in doc["rows"]],
            valid_tokens_last_block=[int(v) for v in doc["valid_tokens_last_block"]],
            block_size=block_size,
        )
        table.validate()
        return table


def generate_workload(spec: WorkloadSpec, seed: int = 0) -> BlockTable:
    """Build the block table for a ``(B, L)`` workload.

    Block IDs are dense non-negative integers assigned in generation order
    (level-major, then node within level), so the same spec always yields the
    same table; ``seed`` is accepted for interface symmetry with the tensor
    generators downstream and does not perturb the structure.
    """
    spec.validate()
    levels = len(spec.level_counts)
    next_block = 0
    node_blocks: list[list[list[int]]] = []
    for level in range(levels):
        per_node = spec.level_lengths[level] // spec.block_size
        this_level = []
        for _ in range(spec.level_counts[level]):
            this_level.append(list(range(next_block, next_block + per_node)))
            next_block += per_node
        node_blocks.append(this_level)

    batch = spec.batch_size
    rows: list[list[int]] = []
    for q in range(batch):
        row: list[int] = []
        for level in range(levels):
            ancestor = q * spec.level_counts[level] // batch
            row.extend(node_blocks[level][ancestor])
        rows.append(row)

    table = BlockTable(
        rows=rows,
        valid_tokens_last_block=[spec.block_size] * batch,
        block_size=spec.block_size,
    )
    table.validate()
    return table


@dataclass
class PrefixNode:
    """One run of KV blocks shared by every query in the subtree.

    ``token_len`` is the number of valid tokens covered by ``block_ids``
    (only the final block of a run can be partial).  ``query_ids`` is
    non-empty at leaves only.
    """

    block_ids: tuple[int, ...]
    token_len: int
    num_queries: int
    children: list["PrefixNode"] = field(default_factory=list)
    query_ids: tuple[int, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def subtree_queries(self) -> list[int]:
        if self.is_leaf:
            return list(self.query_ids)
        out: list[int] = []
        for child in self.children:
            out.extend(child.subtree_queries())
        return out


@dataclass
class PrefixForest:
    roots: list[PrefixNode]
    block_size: int

    def iter_nodes(self) -> Iterator[PrefixNode]:
        stack = list(reversed(self.roots))
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    @property
    def node_count(self) -> int:
        return sum(1 for _ in self.iter_nodes())


def build_forest(table: BlockTable) -> PrefixForest:
    """Convert a block table into a forest of maximal shared prefixes.

    Rows are compared as (block_id, tokens) units so that a partially filled
    final block is shared only between rows that end on it with the same
    valid-token count.  Single-query groups collapse into one leaf holding
    the whole remaining suffix; a group whose rows all end together becomes
    an internal node with empty leaves.
    """
    table.validate()
    units = [table.row_units(q) for q in range(table.num_queries)]

    def cell(qids: list[int], pos: int) -> PrefixNode:
        if len(qids) == 1:
            q = qids[0]
            suffix = units[q][pos:]
            return PrefixNode(
                block_ids=tuple(u[0] for u in suffix),
                token_len=sum(u[1] for u in suffix),
                num_queries=1,
                query_ids=(q,),
            )
        # Extend the shared run while every row continues with the same unit.
        run_end = pos
        while all(run_end < len(units[q]) for q in qids):
            first = units[qids[0]][run_end]
            if any(units[q][run_end] != first for q in qids[1:]):
                break
            run_end += 1
        run = units[qids[0]][pos:run_end]
        ended = [q for q in qids if len(units[q]) == run_end]
        ongoing = [q for q in qids if len(units[q]) > run_end]
        children = [
            PrefixNode(block_ids=(), token_len=0, num_queries=1, query_ids=(q,))
            for q in ended
        ]
        for group in _group_by_unit(ongoing, run_end):
            children.append(cell(group, run_end))
        return PrefixNode(
            block_ids=tuple(u[0] for u in run),
            token_len=sum(u[1] for u in run),
            num_queries=len(qids),
            children=children,
        )

    def _group_by_unit(qids: list[int], pos: int) -> list[list[int]]:
        groups: dict[tuple[int, int], list[int]] = {}
        for q in qids:
            groups.setdefault(units[q][pos], []).append(q)
        return list(groups.values())

    roots = [cell(group, 0) for group in _group_by_unit(list(range(table.num_queries)), 0)]
    return PrefixForest(roots=roots, block_size=table.block_size)


def flatten_forest(forest: PrefixForest) -> dict[int, list[int]]:
    """Reconstruct every query's block row by walking root-to-leaf paths."""
    rows: dict[int, list[int]] = {}

    def walk(node: PrefixNode, prefix: list[int]) -> None:
        path = prefix + list(node.block_ids)
        if node.is_leaf:
            for q in node.query_ids:
                rows[q] = path
        for child in node.children:
            walk(child, path)

    for root in forest.roots:
        walk(root, [])
    return rows


@dataclass(frozen=True)
class CtaPack:
    """One scheduled unit: a set of queries attending one contiguous KV span."""

    query_ids: tuple[int, ...]
    block_ids: tuple[int, ...]
    kv_len: int
    produces_partial: bool = False

    @property
    def q(self) -> int:
        return len(self.query_ids)

    def __post_init__(self):
        if self.q < 1:
            raise InvalidSpec("a pack needs at least one query")
        if self.kv_len < 1:
            raise InvalidSpec("a pack needs at least one token of KV")


@dataclass(frozen=True)
class Partition:
    """A packer's output: packs plus the fingerprint of the source table."""

    packs: tuple[CtaPack, ...]
    source_fingerprint: str

    @property
    def pack_count(self) -> int:
        return len(self.packs)

    def query_pack_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for pack in self.packs:
            for q in pack.query_ids:
                counts[q] = counts.get(q, 0) + 1
        return counts

    def to_json(self) -> dict:
        return {
            "packs": [
                {"queries": list(p.query_ids), "blocks": list(p.block_ids), "kv_len": p.kv_len}
                for p in self.packs
            ],
            "fingerprint": self.source_fingerprint,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Partition":
        packs = tuple(
            CtaPack(
                query_ids=tuple(p["queries"]),
                block_ids=tuple(p["blocks"]),
                kv_len=int(p["kv_len"]),
            )
            for p in doc["packs"]
        )
        return cls(packs=packs, source_fingerprint=doc["fingerprint"])


def assemble_partition(packs: Sequence[CtaPack], table: BlockTable) -> Partition:
    """Finalize packs into a Partition, marking which packs feed the merge
    stage (any member query also appears elsewhere)."""
    counts: dict[int, int] = {}
    for pack in packs:
        for q in pack.query_ids:
            counts[q] = counts.get(q, 0) + 1
    final = tuple(
        CtaPack(
            query_ids=p.query_ids,
            block_ids=p.block_ids,
            kv_len=p.kv_len,
            produces_partial=any(counts[q] > 1 for q in p.query_ids),
        )
        for p in packs
    )
    return Partition(packs=final, source_fingerprint=table.fingerprint())


def validate_partition(partition: Partition, table: BlockTable) -> None:
    """Check exact coverage: each query's packs tile its row with no overlap
    or gap, at matching token counts."""
    from .errors import CoverageGap

    got_blocks: dict[int, list[int]] = {q: [] for q in range(table.num_queries)}
    got_tokens: dict[int, int] = {q: 0 for q in range(table.num_queries)}
    for pack in partition.packs:
        for q in pack.query_ids:
            if q not in got_blocks:
                raise CoverageGap(f"pack references unknown query {q}")
            got_blocks[q].extend(pack.block_ids)
            got_tokens[q] += pack.kv_len
    for q in range(table.num_queries):
        if sorted(got_blocks[q]) != sorted(table.rows[q]):
            raise CoverageGap(f"query {q}: packed blocks do not tile its row")
        if got_tokens[q] != table.kv_len(q):
            raise CoverageGap(f"query {q}: packed tokens {got_tokens[q]} != {table.kv_len(q)}")


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
