"""Exact decode-attention numerics: full softmax, per-CTA partials, and the
online-softmax merge.

Each CTA covering part of a query's KV emits, per (query, head), a max
score, an exp-sum accumulator and a value-weighted sum.  Merging rescales
every partial to the global max before summing, so splitting a query's KV
across any number of CTAs reproduces monolithic attention up to float
rounding.  Double precision is the reference; a reduced mode round-trips
partials through float32 to mirror intermediate storage width.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    CoverageGap,
    EmptyPartialList,
    EmptySpan,
    NonPositiveDenominator,
    ShapeMismatch,
)
from .simulator import CtaTask
from .workload import BlockTable, CtaPack, Partition, WorkloadSpec

KvStore = dict[int, tuple[np.ndarray, np.ndarray]]


def generate_qkv(table: BlockTable, spec: WorkloadSpec, seed: int) -> tuple[np.ndarray, KvStore]:
    """Seeded random Q plus per-block K/V tensors.

    Blocks are generated in sorted-ID order, so the same (table, seed) pair
    yields identical tensors regardless of how the batch later gets packed.
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((table.num_queries, spec.num_heads, spec.head_dim))
    store: KvStore = {}
    blocks = sorted({b for row in table.rows for b in row})
    for block in blocks:
        k = rng.standard_normal((table.block_size, spec.num_kv_heads, spec.head_dim))
        v = rng.standard_normal((table.block_size, spec.num_kv_heads, spec.head_dim))
        store[block] = (k, v)
    return q, store


def gather_kv(
    table: BlockTable, store: KvStore, query: int
) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate a query's blocks into [kv_len, kv_heads, d] K/V arrays."""
    k = np.concatenate([store[b][0] for b in table.rows[query]], axis=0)
    v = np.concatenate([store[b][1] for b in table.rows[query]], axis=0)
    kv_len = table.kv_len(query)
    return k[:kv_len], v[:kv_len]


def _expand_heads(kv: np.ndarray, num_heads: int) -> np.ndarray:
    """Map [t, kv_heads, d] onto [t, num_heads, d]; head h reads kv-head
    h // (num_heads // kv_heads)."""
    kv_heads = kv.shape[1]
    group = num_heads // kv_heads
    idx = np.arange(num_heads) // group
    return kv[:, idx, :]


def full_attention(
    q: np.ndarray,
    keys: Sequence[np.ndarray],
    values: Sequence[np.ndarray],
    scale: Optional[float] = None,
) -> np.ndarray:
    """Numerically stable softmax attention over each query's own KV.

    ``q`` is [num_queries, heads, d]; ``keys``/``values`` hold one
    [kv_len, kv_heads, d] array per query.
    """
    if q.ndim != 3:
        raise ShapeMismatch(f"q must be [queries, heads, d], got {q.shape}")
    if len(keys) != q.shape[0] or len(values) != q.shape[0]:
        raise ShapeMismatch("need one K and one V per query")
    num_heads, d = q.shape[1], q.shape[2]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    out = np.empty_like(q, dtype=np.float64)
    for i in range(q.shape[0]):
        k, v = keys[i], values[i]
        if k.shape != v.shape or k.ndim != 3 or k.shape[2] != d:
            raise ShapeMismatch(f"bad K/V shapes for query {i}: {k.shape} vs {v.shape}")
        if num_heads % k.shape[1] != 0:
            raise ShapeMismatch("num_heads must be a multiple of kv_heads")
        ke = _expand_heads(k.astype(np.float64), num_heads)
        ve = _expand_heads(v.astype(np.float64), num_heads)
        scores = np.einsum("hd,thd->ht", q[i].astype(np.float64), ke) * scale
        peak = scores.max(axis=1, keepdims=True)
        weights = np.exp(scores - peak)
        denom = weights.sum(axis=1, keepdims=True)
        out[i] = np.einsum("ht,thd->hd", weights / denom, ve)
    return out


@dataclass
class PartialResult:
    """Per-(query, head) CTA output: max score, exp-sum, weighted V sum."""

    max_score: float
    exp_sum: float
    weighted_sum: np.ndarray

    def scaled(self, factor: float) -> "PartialResult":
        return PartialResult(self.max_score, self.exp_sum * factor, self.weighted_sum * factor)


@dataclass
class PartialBatch:
    """Vectorized partials for one CTA: arrays over (query, head)."""

    max_score: np.ndarray     # [q, heads]
    exp_sum: np.ndarray       # [q, heads]
    weighted_sum: np.ndarray  # [q, heads, d]

    def at(self, query_pos: int, head: int) -> PartialResult:
        return PartialResult(
            max_score=float(self.max_score[query_pos, head]),
            exp_sum=float(self.exp_sum[query_pos, head]),
            weighted_sum=self.weighted_sum[query_pos, head].copy(),
        )

    def astype(self, dtype) -> "PartialBatch":
        return PartialBatch(
            max_score=self.max_score.astype(dtype),
            exp_sum=self.exp_sum.astype(dtype),
            weighted_sum=self.weighted_sum.astype(dtype),
        )


def cta_partial(
    q_pack: np.ndarray,
    k_span: np.ndarray,
    v_span: np.ndarray,
    scale: Optional[float] = None,
) -> PartialBatch:
    """Attention partials of a pack's queries over one KV span."""
    if k_span.shape[0] == 0:
        raise EmptySpan("CTA span covers zero tokens")
    if q_pack.ndim != 3 or k_span.ndim != 3 or k_span.shape != v_span.shape:
        raise ShapeMismatch("q_pack must be [q, heads, d]; K/V spans [t, kv_heads, d]")
    num_heads, d = q_pack.shape[1], q_pack.shape[2]
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    ke = _expand_heads(k_span.astype(np.float64), num_heads)
    ve = _expand_heads(v_span.astype(np.float64), num_heads)
    scores = np.einsum("qhd,thd->qht", q_pack.astype(np.float64), ke) * scale
    peak = scores.max(axis=2)
    weights = np.exp(scores - peak[:, :, None])
    return PartialBatch(
        max_score=peak,
        exp_sum=weights.sum(axis=2),
        weighted_sum=np.einsum("qht,thd->qhd", weights, ve),
    )


def merge_partials(parts: Sequence[PartialResult]) -> np.ndarray:
    """Online-softmax combine of one (query, head)'s partials into its output.

    Rescaling by exp(max_i - max*) keeps every term in range; the result is
    order-insensitive up to float associativity, and multiplying all inputs
    by a common positive factor cancels exactly.
    """
    if not parts:
        raise EmptyPartialList("nothing to merge")
    peak = max(p.max_score for p in parts)
    exp_sum = 0.0
    acc = np.zeros_like(parts[0].weighted_sum, dtype=np.float64)
    for p in parts:
        factor = math.exp(p.max_score - peak)
        exp_sum += p.exp_sum * factor
        acc = acc + p.weighted_sum * factor
    if not exp_sum > 0.0:
        raise NonPositiveDenominator(f"merged exp-sum is {exp_sum}")
    return acc / exp_sum


def _merge_batch_into(
    state: tuple[np.ndarray, np.ndarray, np.ndarray],
    rows: np.ndarray,
    batch: PartialBatch,
) -> None:
    """Fold one CTA's partials into the running per-query accumulators."""
    peak, exp_sum, acc = state
    new_peak = np.maximum(peak[rows], batch.max_score)
    old_factor = np.exp(peak[rows] - new_peak)
    new_factor = np.exp(batch.max_score - new_peak)
    exp_sum[rows] = exp_sum[rows] * old_factor + batch.exp_sum * new_factor
    acc[rows] = acc[rows] * old_factor[:, :, None] + batch.weighted_sum * new_factor[:, :, None]
    peak[rows] = new_peak


def run_packed_attention(
    table: BlockTable,
    partition_or_tasks: Union[Partition, Sequence[CtaTask], Sequence[CtaPack]],
    kv_store: KvStore,
    q: np.ndarray,
    spec: WorkloadSpec,
    intermediate_dtype=None,
) -> np.ndarray:
    """Evaluate attention through the pack/split/merge pipeline.

    Every pack or task contributes per-(query, head) partials over its span;
    per-query merges produce output shaped like ``full_attention``'s.  With
    ``intermediate_dtype=np.float32`` partials are round-tripped through
    reduced precision before merging.
    """
    units = _coverage_units(partition_or_tasks)
    _check_coverage(units, table)
    if q.shape[0] != table.num_queries:
        raise ShapeMismatch("Q row count must match the table")

    num_heads, d = spec.num_heads, spec.head_dim
    peak = np.full((table.num_queries, num_heads), -np.inf)
    exp_sum = np.zeros((table.num_queries, num_heads))
    acc = np.zeros((table.num_queries, num_heads, d))
    state = (peak, exp_sum, acc)

    for queries, block_ids, kv_len in units:
        rows = np.asarray(queries, dtype=np.intp)
        k = np.concatenate([kv_store[b][0] for b in block_ids], axis=0)[:kv_len]
        v = np.concatenate([kv_store[b][1] for b in block_ids], axis=0)[:kv_len]
        batch = cta_partial(q[rows], k, v)
        if intermediate_dtype is not None:
            batch = batch.astype(intermediate_dtype).astype(np.float64)
        _merge_batch_into(state, rows, batch)

    if not np.all(exp_sum > 0.0):
        raise NonPositiveDenominator("some query/head accumulated no weight")
    return acc / exp_sum[:, :, None]


def _coverage_units(parts) -> list[tuple[tuple[int, ...], tuple[int, ...], int]]:
    if isinstance(parts, Partition):
        items = parts.packs
    else:
        items = list(parts)
    units = []
    for item in items:
        if isinstance(item, CtaTask):
            units.append((item.queries, item.block_ids, item.kv_len))
        elif isinstance(item, CtaPack):
            units.append((item.query_ids, item.block_ids, item.kv_len))
        else:
            raise TypeError(f"cannot interpret {type(item)!r} as a coverage unit")
    return units


def _check_coverage(units, table: BlockTable) -> None:
    blocks: dict[int, list[int]] = {qid: [] for qid in range(table.num_queries)}
    tokens: dict[int, int] = {qid: 0 for qid in range(table.num_queries)}
    for queries, block_ids, kv_len in units:
        for qid in queries:
            if qid not in blocks:
                raise CoverageGap(f"unknown query {qid}")
            blocks[qid].extend(block_ids)
            tokens[qid] += kv_len
    for qid in range(table.num_queries):
        if sorted(blocks[qid]) != sorted(table.rows[qid]) or tokens[qid] != table.kv_len(qid):
            raise CoverageGap(f"query {qid}: KV span not exactly covered")


def max_rel_error(result: np.ndarray, reference: np.ndarray) -> float:
    """Largest absolute deviation normalized by the reference magnitude."""
    scale = max(float(np.max(np.abs(reference))), 1e-300)
    return float(np.max(np.abs(result - reference))) / scale


_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_MAGIC = b"PPK1"


def dump_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian binary with a shape header, for
    cross-checking against external implementations."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a tensor dump")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            dtype = _CODE_DTYPES[code].newbyteorder("<")
            data = fh.read(int(np.prod(shape)) * dtype.itemsize)
            out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(_CODE_DTYPES[code])
    return out
