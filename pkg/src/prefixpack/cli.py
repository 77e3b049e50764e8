"""Command-line front end: generate workloads, run strategy comparisons,
sweep parameters, and verify numerics.

Exit codes: 0 success, 2 invalid workload spec, 3 verification failure,
4 no feasible tile configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from . import attention, packer, simulator, tiles
from .errors import EmptyFeasibleSet, InvalidSpec, NoFeasibleConfig
from .workload import BlockTable, WorkloadSpec, generate_workload, load_json

EXIT_OK = 0
EXIT_INVALID_SPEC = 2
EXIT_VERIFY_FAILED = 3
EXIT_INFEASIBLE = 4

STRATEGIES = (
    "packed",
    "query_centric",
    "naive",
    "packed_fixed_tile",
    "packed_serial_streams",
    "packed_no_split",
)

FIXED_TILE = (64, 128)
DEFAULT_TOLERANCE = 1e-10


def atomic_write(path: str, data: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class Scenario:
    spec: WorkloadSpec
    hardware: tiles.HardwareModel
    strategies: list[str]
    seed: int
    output: str
    tolerance: float
    verify: bool

    @classmethod
    def load(cls, path: str) -> "Scenario":
        doc = load_json(path)
        workload = doc["workload"]
        if isinstance(workload, str):
            base = os.path.dirname(os.path.abspath(path))
            workload = load_json(os.path.join(base, workload))
        spec = WorkloadSpec.from_json(workload)
        strategies = list(doc.get("strategies", ["packed"]))
        if not strategies:
            raise ValueError("scenario lists no strategies")
        unknown = [s for s in strategies if s not in STRATEGIES]
        if unknown:
            raise ValueError(f"unknown strategies {unknown}; choose from {STRATEGIES}")
        return cls(
            spec=spec,
            hardware=tiles.load_hardware_profile(doc.get("hardware")),
            strategies=strategies,
            seed=int(doc.get("seed", 0)),
            output=doc.get("output", "report.json"),
            tolerance=float(doc.get("tolerance", DEFAULT_TOLERANCE)),
            verify=bool(doc.get("verify", False)),
        )


def partition_for_strategy(strategy: str, table: BlockTable) -> "packer.Partition":
    if strategy == "query_centric":
        return simulator.baseline_query_centric(table)
    if strategy == "naive":
        return packer.naive_per_node(table)
    return packer.pack_batch(table)


def run_strategy(
    strategy: str,
    table: BlockTable,
    spec: WorkloadSpec,
    hw: tiles.HardwareModel,
    fs: tiles.FeasibleSet,
    n_tree: tiles.KvTileTree,
    seed: int,
    verify: bool,
    tolerance: float,
) -> dict:
    partition = partition_for_strategy(strategy, table)
    tasks = simulator.plan_tasks(
        partition,
        fs,
        n_tree,
        spec,
        force_config=FIXED_TILE if strategy == "packed_fixed_tile" else None,
        split=strategy != "packed_no_split",
    )
    report = simulator.simulate(
        tasks, hw, spec, serial_streams=strategy == "packed_serial_streams"
    )
    row = {
        "strategy": strategy,
        "kv_bytes": report.kv_bytes_loaded,
        "intermediate_bytes": report.intermediate_bytes,
        "total_bytes": report.kv_bytes_loaded + report.intermediate_bytes,
        "makespan_ns": report.makespan,
        "mem_waste": report.mem_waste,
        "exec_bubble": report.exec_bubble,
        "pack_count": partition.pack_count,
        "task_count": len(tasks),
        "verified": None,
    }
    if verify:
        q, store = attention.generate_qkv(table, spec, seed)
        packed = attention.run_packed_attention(table, tasks, store, q, spec)
        reference = attention.full_attention(
            q,
            [attention.gather_kv(table, store, i)[0] for i in range(table.num_queries)],
            [attention.gather_kv(table, store, i)[1] for i in range(table.num_queries)],
        )
        err = attention.max_rel_error(packed, reference)
        row["verified"] = bool(err <= tolerance)
        row["max_rel_error"] = err
    return row


def cmd_gen(args) -> int:
    try:
        spec = WorkloadSpec.from_json(load_json(args.spec))
        table = generate_workload(spec, args.seed)
    except (InvalidSpec, OSError, ValueError) as exc:
        print(f"invalid workload spec: {exc}", file=sys.stderr)
        return EXIT_INVALID_SPEC
    atomic_write(args.out, json.dumps(table.to_json(), indent=1, sort_keys=True) + "\n")
    blocks, tokens = simulator.distinct_block_census(table)
    floor = simulator.theoretical_min_kv_bytes(table, spec)
    print(f"wrote {args.out}: {table.num_queries} rows")
    print(f"distinct blocks: {blocks} ({tokens} tokens)")
    print(f"theoretical minimum KV traffic: {floor} bytes/step")
    return EXIT_OK


def _prepare_tiles(scenario: Scenario):
    regs = tiles.RegisterUsageTable.load()
    fs = tiles.solve_feasible_for_spec(scenario.hardware, regs, scenario.spec)
    if not fs.configs:
        raise EmptyFeasibleSet("hardware profile admits no tile configuration")
    n_tree = tiles.calibrate_n_tree(fs, scenario.hardware, scenario.spec)
    return fs, n_tree


def cmd_run(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except (InvalidSpec, OSError, ValueError, KeyError) as exc:
        print(f"bad scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID_SPEC
    verify = args.verify or scenario.verify
    table = generate_workload(scenario.spec, scenario.seed)
    try:
        fs, n_tree = _prepare_tiles(scenario)
        rows = [
            run_strategy(
                s, table, scenario.spec, scenario.hardware, fs, n_tree,
                scenario.seed, verify, scenario.tolerance,
            )
            for s in scenario.strategies
        ]
    except (EmptyFeasibleSet, NoFeasibleConfig) as exc:
        print(f"infeasible tiles: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = args.out or scenario.output
    atomic_write(out, json.dumps({"rows": rows}, indent=1, sort_keys=True) + "\n")
    atomic_write(out + ".meta.json", json.dumps({"written_at": time.time()}) + "\n")
    for row in rows:
        print(
            f"{row['strategy']}: kv={row['kv_bytes']} inter={row['intermediate_bytes']} "
            f"makespan={row['makespan_ns']:.1f}ns packs={row['pack_count']} "
            f"verified={row['verified']}"
        )
    if verify and any(r["verified"] is False for r in rows):
        return EXIT_VERIFY_FAILED
    return EXIT_OK


SWEEP_AXES = ("batch", "prefix_len", "kv_len", "fan_out")


def _spec_at(spec: WorkloadSpec, axis: str, value: int) -> WorkloadSpec:
    b, lengths = list(spec.level_counts), list(spec.level_lengths)
    if axis == "batch":
        b[-1] = value
    elif axis == "prefix_len":
        lengths[0] = value
    elif axis == "kv_len":
        lengths[-1] = value
    elif axis == "fan_out":
        parent = b[-2] if len(b) > 1 else 1
        b[-1] = parent * value
    else:
        raise ValueError(f"unknown axis {axis}; choose from {SWEEP_AXES}")
    out = WorkloadSpec(
        level_counts=tuple(b),
        level_lengths=tuple(lengths),
        block_size=spec.block_size,
        num_heads=spec.num_heads,
        num_kv_heads=spec.num_kv_heads,
        head_dim=spec.head_dim,
        kv_dtype_bytes=spec.kv_dtype_bytes,
        intermediate_dtype_bytes=spec.intermediate_dtype_bytes,
    )
    out.validate()
    return out


def cmd_sweep(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except (InvalidSpec, OSError, ValueError, KeyError) as exc:
        print(f"bad scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID_SPEC
    values = [int(v) for v in args.values.split(",")] if args.values else []
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        [
            "axis", "value", "strategy", "kv_bytes", "intermediate_bytes", "total_bytes",
            "makespan_ns", "mem_waste", "exec_bubble", "pack_count", "task_count",
            "theoretical_min_kv_bytes", "redundancy_ratio",
        ]
    )
    try:
        for value in values:
            spec = _spec_at(scenario.spec, args.axis, value)
            table = generate_workload(spec, scenario.seed)
            point = Scenario(
                spec=spec,
                hardware=scenario.hardware,
                strategies=scenario.strategies,
                seed=scenario.seed,
                output=scenario.output,
                tolerance=scenario.tolerance,
                verify=False,
            )
            fs, n_tree = _prepare_tiles(point)
            floor = simulator.theoretical_min_kv_bytes(table, spec)
            for strategy in scenario.strategies:
                row = run_strategy(
                    strategy, table, spec, scenario.hardware, fs, n_tree,
                    scenario.seed, False, scenario.tolerance,
                )
                writer.writerow(
                    [
                        args.axis, value, strategy, row["kv_bytes"], row["intermediate_bytes"],
                        row["total_bytes"], f"{row['makespan_ns']:.3f}",
                        f"{row['mem_waste']:.6f}", f"{row['exec_bubble']:.6f}",
                        row["pack_count"], row["task_count"], floor,
                        f"{row['kv_bytes'] / floor:.6f}",
                    ]
                )
    except (EmptyFeasibleSet, NoFeasibleConfig) as exc:
        print(f"infeasible tiles: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    atomic_write(args.out, buf.getvalue())
    print(f"wrote {args.out}: {len(values) * len(scenario.strategies)} rows")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        spec = WorkloadSpec.from_json(load_json(args.workload))
        table = generate_workload(spec, args.seed)
    except (InvalidSpec, OSError, ValueError) as exc:
        print(f"invalid workload spec: {exc}", file=sys.stderr)
        return EXIT_INVALID_SPEC
    partition = partition_for_strategy(args.strategy, table)
    q, store = attention.generate_qkv(table, spec, args.seed)
    packed = attention.run_packed_attention(table, partition, store, q, spec)
    reference = attention.full_attention(
        q,
        [attention.gather_kv(table, store, i)[0] for i in range(table.num_queries)],
        [attention.gather_kv(table, store, i)[1] for i in range(table.num_queries)],
    )
    err = attention.max_rel_error(packed, reference)
    print(f"max relative error: {err:.3e} (tolerance {args.tol:.1e})")
    if err > args.tol:
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefixpack",
        description="Prefix-shared decode attention: packing, tiling and scheduling models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a block table from a workload spec")
    gen.add_argument("--spec", required=True, help="workload spec JSON path")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="block table JSON output path")
    gen.set_defaults(func=cmd_gen)

    run = sub.add_parser("run", help="compare strategies on one scenario")
    run.add_argument("--scenario", required=True, help="scenario JSON path")
    run.add_argument("--verify", action="store_true", help="check numerics per strategy")
    run.add_argument("--out", default=None, help="override the scenario's report path")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="replicate a scenario across a parameter grid")
    sweep.add_argument("--scenario", required=True)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="comma-separated grid values")
    sweep.add_argument("--out", default="sweep.csv")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="check packed numerics against full attention")
    verify.add_argument("--workload", required=True, help="workload spec JSON path")
    verify.add_argument("--strategy", default="packed", choices=STRATEGIES)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    verify.set_defaults(func=cmd_verify)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
