"""Desk-scale model of prefix-shared LLM decode attention.

The pipeline: pack queries that share KV-cache prefixes into CTAs under a
memory-profit model, pick per-CTA tile sizes from a hardware-feasible set,
split long KV spans and spread tile configs over streams, simulate the
schedule on an analytical GPU cost model, and merge per-CTA partial results
with online softmax to reproduce monolithic attention exactly.
"""

from .errors import (
    CoverageGap,
    EmptyFeasibleSet,
    EmptyPartialList,
    EmptySpan,
    InvalidChildIndex,
    InvalidSpec,
    MissingRegisterEntry,
    NoFeasibleConfig,
    NonPositiveDenominator,
    PrefixpackError,
    ShapeMismatch,
)
from .workload import (
    BlockTable,
    CtaPack,
    Partition,
    PrefixForest,
    PrefixNode,
    WorkloadSpec,
    assemble_partition,
    build_forest,
    flatten_forest,
    generate_workload,
    validate_partition,
)
from .packer import (
    PackCache,
    ProfitModel,
    intra_node_profit,
    naive_per_node,
    pack_batch,
    pack_batch_async,
    pack_forest,
    scheme_profits,
    tree_heuristic,
)
from .tiles import (
    Constraint,
    FeasibleSet,
    HardwareModel,
    KvTileTree,
    RegisterUsageTable,
    TileConfig,
    calibrate_n_tree,
    derive_concurrency,
    load_hardware_profile,
    select_kv_tile,
    select_q_tile,
    solve_feasible,
    solve_feasible_for_spec,
    synthetic_register_table,
)
from .simulator import (
    CtaTask,
    SimReport,
    TrafficReport,
    account_traffic,
    assign_streams,
    baseline_query_centric,
    distinct_block_census,
    plan_tasks,
    simulate,
    split_long_kv,
    theoretical_min_kv_bytes,
)
from .attention import (
    PartialBatch,
    PartialResult,
    cta_partial,
    full_attention,
    gather_kv,
    generate_qkv,
    max_rel_error,
    merge_partials,
    run_packed_attention,
)

__version__ = "0.1.0"
