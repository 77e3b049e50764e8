"""Traffic accounting and a discrete-event model of multi-stream CTA execution.

Every CTA runs a tiled pipeline: one inherent-latency ramp, then per KV tile
the maximum of its memory time and its compute time (double buffering
overlaps the two).  Global-memory bandwidth is a single shared resource
split equally among all CTAs currently in a memory phase; compute runs on
the CTA's own SM slot.  SMs offer ``concurrency(cfg)`` resident CTAs per
config, modeled as fractional slot capacity so different tile configs can
share an SM.
"""

from __future__ import annotations

import heapq
import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .errors import NoFeasibleConfig
from .tiles import FeasibleSet, HardwareModel, KvTileTree, TileConfig, select_q_tile
from .workload import BlockTable, CtaPack, Partition, WorkloadSpec, assemble_partition


def kv_token_bytes(spec: WorkloadSpec) -> int:
    """Bytes moved per attended token: K and V rows over all KV heads."""
    return spec.head_dim * spec.kv_dtype_bytes * 2 * spec.num_kv_heads


def intermediate_round_trip_bytes(spec: WorkloadSpec) -> int:
    """One partial write plus one merge read of the per-head value-weighted
    vectors for a single query, at intermediate precision."""
    return 2 * spec.head_dim * spec.num_heads * spec.intermediate_dtype_bytes


@dataclass(frozen=True)
class TrafficReport:
    kv_bytes: int
    intermediate_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.kv_bytes + self.intermediate_bytes


def _membership_intermediate_bytes(memberships: Iterable[Sequence[int]], spec: WorkloadSpec) -> int:
    counts: dict[int, int] = {}
    for queries in memberships:
        for q in queries:
            counts[q] = counts.get(q, 0) + 1
    rt = intermediate_round_trip_bytes(spec)
    return sum(n * rt for n in counts.values() if n >= 2)


def account_traffic(partition: Partition, spec: WorkloadSpec) -> TrafficReport:
    """Modeled global-memory traffic of a partition.

    KV bytes charge every pack's span once.  A query appearing in more than
    one pack pays one intermediate round trip per pack it appears in;
    queries computed by a single CTA write their output directly and add
    nothing.
    """
    kv = sum(p.kv_len for p in partition.packs) * kv_token_bytes(spec)
    inter = _membership_intermediate_bytes((p.query_ids for p in partition.packs), spec)
    return TrafficReport(kv_bytes=kv, intermediate_bytes=inter)


def distinct_block_census(table: BlockTable) -> tuple[int, int]:
    """(distinct block count, total distinct tokens); a block shared at
    different fill levels counts at its fullest use."""
    tokens: dict[int, int] = {}
    for q in range(table.num_queries):
        for block, t in table.row_units(q):
            tokens[block] = max(tokens.get(block, 0), t)
    return len(tokens), sum(tokens.values())


def theoretical_min_kv_bytes(table: BlockTable, spec: WorkloadSpec) -> int:
    """Traffic floor: every distinct KV block loaded from global memory
    exactly once per decode step."""
    _, total_tokens = distinct_block_census(table)
    return total_tokens * kv_token_bytes(spec)


def baseline_query_centric(table: BlockTable) -> Partition:
    """One-query-per-CTA packing: each query loads its full row, shared
    prefixes are re-read per query, and no merges occur."""
    packs = [
        CtaPack(
            query_ids=(q,),
            block_ids=tuple(table.rows[q]),
            kv_len=table.kv_len(q),
        )
        for q in range(table.num_queries)
    ]
    return assemble_partition(packs, table)


@dataclass
class CtaTask:
    """One scheduled CTA: queries x contiguous KV span at a tile config."""

    queries: tuple[int, ...]
    block_ids: tuple[int, ...]
    kv_len: int
    cfg: Optional[TileConfig] = None
    stream_id: Optional[int] = None
    pack_index: int = 0
    split_index: int = 0
    split_of: int = 1

    @property
    def q(self) -> int:
        return len(self.queries)


def split_long_kv(tasks: Sequence[CtaTask], block_size: int) -> list[CtaTask]:
    """Split every task whose KV length exceeds the batch mean into
    near-equal block-aligned parts.

    A task of ``kv_len > mean`` becomes ``ceil(kv_len / mean)`` parts whose
    block counts differ by at most one, which keeps every part under the
    mean up to one block of rounding slack.  Parts carry split identities
    for the merge stage; everything at or below the mean passes through.
    """
    if not tasks:
        return []
    mean = sum(t.kv_len for t in tasks) / len(tasks)
    out: list[CtaTask] = []
    for task in tasks:
        if task.kv_len <= mean:
            out.append(task)
            continue
        parts = math.ceil(task.kv_len / mean)
        nblocks = max(len(task.block_ids), math.ceil(task.kv_len / block_size))
        parts = min(parts, nblocks)
        base, extra = divmod(nblocks, parts)
        start = 0
        consumed = 0
        for i in range(parts):
            take = base + (1 if i < extra else 0)
            blocks = task.block_ids[start:start + take] if task.block_ids else ()
            tokens = min(take * block_size, task.kv_len - consumed)
            out.append(
                replace(
                    task,
                    block_ids=blocks,
                    kv_len=tokens,
                    split_index=i,
                    split_of=parts,
                )
            )
            start += take
            consumed += tokens
    return out


def assign_streams(tasks: Sequence[CtaTask]) -> dict[int, list[CtaTask]]:
    """Group tasks by tile config, one stream per distinct (m, n); tasks keep
    their relative order inside a stream."""
    configs = sorted({t.cfg.key() for t in tasks if t.cfg is not None})
    stream_of = {key: i for i, key in enumerate(configs)}
    streams: dict[int, list[CtaTask]] = {i: [] for i in range(len(configs))}
    for task in tasks:
        if task.cfg is None:
            raise NoFeasibleConfig("task has no tile configuration")
        sid = stream_of[task.cfg.key()]
        task.stream_id = sid
        streams[sid].append(task)
    return streams


def plan_tasks(
    partition: Partition,
    fs: FeasibleSet,
    n_tree: KvTileTree,
    spec: WorkloadSpec,
    force_config: Optional[tuple[int, int]] = None,
    split: bool = True,
) -> list[CtaTask]:
    """Turn packs into simulator tasks: round-up m (pre-splitting oversized
    packs by query), long-KV splitting, per-task n lookup, stream grouping."""
    m_max = fs.max_m
    drafts: list[CtaTask] = []
    for pidx, pack in enumerate(partition.packs):
        if force_config is not None:
            m = force_config[0]
        elif pack.q <= m_max:
            m = select_q_tile(pack.q, fs)
        else:
            m = m_max
        groups = _equal_query_groups(pack.query_ids, m_max if force_config is None else force_config[0])
        for queries in groups:
            drafts.append(
                CtaTask(
                    queries=queries,
                    block_ids=pack.block_ids,
                    kv_len=pack.kv_len,
                    cfg=TileConfig(m=m, n=0, concurrency=0),  # n resolved below
                    pack_index=pidx,
                )
            )
    if split:
        drafts = split_long_kv(drafts, spec.block_size)
    final: list[CtaTask] = []
    for task in drafts:
        m = task.cfg.m
        if force_config is not None:
            n = force_config[1]
        else:
            # clamp the calibrated n into this m's feasible column
            ns = fs.ns_for_m(m)
            wanted = n_tree.select(task.kv_len)
            n = next((x for x in ns if x >= wanted), ns[-1])
        task.cfg = fs.get(m, n)
        final.append(task)
    assign_streams(final)
    return final


def _equal_query_groups(queries: tuple[int, ...], m_max: int) -> list[tuple[int, ...]]:
    if len(queries) <= m_max:
        return [queries]
    parts = math.ceil(len(queries) / m_max)
    base, extra = divmod(len(queries), parts)
    groups = []
    start = 0
    for i in range(parts):
        take = base + (1 if i < extra else 0)
        groups.append(queries[start:start + take])
        start += take
    return groups


@dataclass
class TaskRecord:
    index: int
    stream: int
    sm: int
    start: float
    end: float
    m: int
    n: int
    q: int
    kv_len: int
    split_index: int
    split_of: int


@dataclass
class SimReport:
    makespan: float
    per_stream: dict[int, tuple[float, float]]
    sm_timelines: list[list[tuple[float, float, int]]]
    kv_bytes_loaded: int
    intermediate_bytes: int
    mem_waste: float
    exec_bubble: float
    tasks: list[TaskRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "makespan_ns": self.makespan,
            "per_stream": {str(k): [v[0], v[1]] for k, v in sorted(self.per_stream.items())},
            "kv_bytes_loaded": self.kv_bytes_loaded,
            "intermediate_bytes": self.intermediate_bytes,
            "mem_waste": self.mem_waste,
            "exec_bubble": self.exec_bubble,
            "task_count": len(self.tasks),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("task,stream,sm,start_ns,end_ns,m,n,q,kv_len,split_index,split_of\n")
        for r in self.tasks:
            buf.write(
                f"{r.index},{r.stream},{r.sm},{r.start:.3f},{r.end:.3f},"
                f"{r.m},{r.n},{r.q},{r.kv_len},{r.split_index},{r.split_of}\n"
            )
        return buf.getvalue()


class _RunState:
    __slots__ = (
        "task", "index", "seq", "share", "cfg_key", "sm", "start", "end",
        "tile", "tile_count", "mem_done", "comp_done",
    )

    def __init__(self, task: CtaTask, index: int):
        self.task = task
        self.index = index
        self.seq = -1
        self.share = 1.0 / task.cfg.concurrency
        self.cfg_key = task.cfg.key()
        self.sm = -1
        self.start = 0.0
        self.end = 0.0
        self.tile = 0
        self.tile_count = max(1, math.ceil(task.kv_len / task.cfg.n))
        self.mem_done = False
        self.comp_done = False


_EV_RAMP = 0
_EV_COMP = 1


def simulate(
    tasks: Sequence[CtaTask],
    hw: HardwareModel,
    spec: WorkloadSpec,
    serial_streams: bool = False,
) -> SimReport:
    """Run the CTA set to completion and report timing plus traffic.

    Streams dispatch their tasks in enqueue order as SM residency frees up;
    residency is tracked per config (an SM hosts up to ``concurrency(cfg)``
    CTAs of each config independently, so one stream's occupancy never
    blocks another's dispatch).  With ``serial_streams`` each stream only
    starts after the previous one has fully drained.  Event ties break
    deterministically on (time, event kind, admission order).
    """
    for task in tasks:
        if task.cfg is None or task.cfg.concurrency < 1:
            raise NoFeasibleConfig(f"task over {task.kv_len} tokens lacks a feasible config")
        if task.q > task.cfg.m:
            raise NoFeasibleConfig(f"{task.q} queries exceed the {task.cfg.m}-row query tile")

    token_bytes = kv_token_bytes(spec)
    kv_loaded = sum(t.kv_len for t in tasks) * token_bytes
    inter_bytes = _membership_intermediate_bytes((t.queries for t in tasks), spec)

    if not tasks:
        return SimReport(
            makespan=0.0,
            per_stream={},
            sm_timelines=[[] for _ in range(hw.num_sms)],
            kv_bytes_loaded=0,
            intermediate_bytes=0,
            mem_waste=0.0,
            exec_bubble=0.0,
        )

    states = [_RunState(t, i) for i, t in enumerate(tasks)]
    stream_ids = sorted({t.stream_id if t.stream_id is not None else 0 for t in tasks})
    queues: dict[int, list[_RunState]] = {sid: [] for sid in stream_ids}
    for st in states:
        queues[st.task.stream_id if st.task.stream_id is not None else 0].append(st)
    pending: dict[int, int] = {sid: len(queues[sid]) for sid in stream_ids}
    queue_pos: dict[int, int] = {sid: 0 for sid in stream_ids}
    serial_cursor = 0

    # Per-SM, per-config resident-CTA counters plus a share total for
    # choosing the emptiest SM in reports.
    sm_counts: list[dict[tuple[int, int], int]] = [dict() for _ in range(hw.num_sms)]
    sm_load = [0.0] * hw.num_sms
    timed: list[tuple[float, int, int, _RunState]] = []  # (time, kind, seq, state)
    memq: list[tuple[float, int, _RunState]] = []        # (V target, seq, state)

    # Fair-share bandwidth ledger: V is cumulative bytes served per loader.
    v_now = 0.0
    v_mark_t = 0.0
    loaders = 0
    seq_counter = 0

    def v_at(t: float) -> float:
        if loaders == 0:
            return v_now
        return v_now + (t - v_mark_t) * hw.bandwidth_bytes_per_ns / loaders

    def advance_to(t: float) -> None:
        nonlocal v_now, v_mark_t
        v_now = v_at(t)
        v_mark_t = t

    def tile_bytes(st: _RunState, tile: int) -> float:
        n = st.task.cfg.n
        tokens = min(n, st.task.kv_len - tile * n)
        return tokens * token_bytes

    def tile_compute_ns(st: _RunState) -> float:
        cfg = st.task.cfg
        return 2.0 * cfg.m * cfg.n * spec.head_dim * spec.num_heads / hw.tensor_throughput

    def start_tile(st: _RunState, t: float) -> None:
        nonlocal loaders
        st.mem_done = False
        st.comp_done = False
        advance_to(t)
        loaders += 1
        heapq.heappush(memq, (v_at(t) + tile_bytes(st, st.tile), st.seq, st))
        heapq.heappush(timed, (t + tile_compute_ns(st), _EV_COMP, st.seq, st))

    def maybe_finish_tile(st: _RunState, t: float) -> None:
        if not (st.mem_done and st.comp_done):
            return
        st.tile += 1
        if st.tile < st.tile_count:
            start_tile(st, t)
        else:
            finish_task(st, t)

    def finish_task(st: _RunState, t: float) -> None:
        st.end = t
        sm_counts[st.sm][st.cfg_key] -= 1
        sm_load[st.sm] -= st.share
        sid = st.task.stream_id if st.task.stream_id is not None else 0
        pending[sid] -= 1
        admit(t)

    def admit(t: float) -> None:
        nonlocal seq_counter, serial_cursor
        if serial_streams:
            while (
                serial_cursor < len(stream_ids)
                and pending[stream_ids[serial_cursor]] == 0
            ):
                serial_cursor += 1
            scan = stream_ids[serial_cursor:serial_cursor + 1]
        else:
            scan = stream_ids
        for sid in scan:
            queue = queues[sid]
            while queue_pos[sid] < len(queue):
                st = queue[queue_pos[sid]]
                sm = _free_sm(sm_counts, sm_load, st.cfg_key, st.task.cfg.concurrency)
                if sm < 0:
                    break
                queue_pos[sid] += 1
                st.sm = sm
                sm_counts[sm][st.cfg_key] = sm_counts[sm].get(st.cfg_key, 0) + 1
                sm_load[sm] += st.share
                st.seq = seq_counter
                seq_counter += 1
                st.start = t
                heapq.heappush(timed, (t + hw.inherent_latency_ns, _EV_RAMP, st.seq, st))

    admit(0.0)

    while timed or memq:
        t_timed = timed[0][0] if timed else math.inf
        if memq and loaders > 0:
            head_v = memq[0][0]
            t_mem = v_mark_t + max(0.0, head_v - v_now) * loaders / hw.bandwidth_bytes_per_ns
        else:
            t_mem = math.inf
        if t_timed <= t_mem:
            t, kind, _, st = heapq.heappop(timed)
            if kind == _EV_RAMP:
                start_tile(st, t)
            else:
                st.comp_done = True
                maybe_finish_tile(st, t)
        else:
            t = t_mem
            advance_to(t)
            _, _, st = heapq.heappop(memq)
            loaders -= 1
            st.mem_done = True
            maybe_finish_tile(st, t)

    makespan = max(st.end for st in states)
    first_start = min(st.start for st in states)

    records = [
        TaskRecord(
            index=st.index,
            stream=st.task.stream_id if st.task.stream_id is not None else 0,
            sm=st.sm,
            start=st.start,
            end=st.end,
            m=st.task.cfg.m,
            n=st.task.cfg.n,
            q=st.task.q,
            kv_len=st.task.kv_len,
            split_index=st.task.split_index,
            split_of=st.task.split_of,
        )
        for st in states
    ]

    per_stream: dict[int, tuple[float, float]] = {}
    for r in records:
        lo, hi = per_stream.get(r.stream, (math.inf, -math.inf))
        per_stream[r.stream] = (min(lo, r.start), max(hi, r.end))

    timelines: list[list[tuple[float, float, int]]] = [[] for _ in range(hw.num_sms)]
    for r in sorted(records, key=lambda r: (r.sm, r.start, r.index)):
        timelines[r.sm].append((r.start, r.end, r.index))

    total_dur = sum(r.end - r.start for r in records)
    if total_dur > 0:
        mem_waste = sum((r.end - r.start) * (r.m - r.q) / r.m for r in records) / total_dur
    else:
        mem_waste = 0.0

    window = makespan - first_start
    if window > 0:
        busy = sum((st.end - st.start) * st.share for st in states)
        exec_bubble = max(0.0, 1.0 - busy / (hw.num_sms * window))
    else:
        exec_bubble = 0.0

    return SimReport(
        makespan=makespan,
        per_stream=per_stream,
        sm_timelines=timelines,
        kv_bytes_loaded=kv_loaded,
        intermediate_bytes=inter_bytes,
        mem_waste=mem_waste,
        exec_bubble=exec_bubble,
        tasks=records,
    )


def _free_sm(
    sm_counts: list[dict[tuple[int, int], int]],
    sm_load: list[float],
    cfg_key: tuple[int, int],
    concurrency: int,
) -> int:
    best = -1
    best_load = None
    for i, counts in enumerate(sm_counts):
        if counts.get(cfg_key, 0) < concurrency and (best_load is None or sm_load[i] < best_load):
            best = i
            best_load = sm_load[i]
    return best
