"""Tile feasibility solving and the per-CTA tile selectors.

A tile candidate ``(m, n)`` survives three checks: on-chip capacity (shared
memory per CTA, registers per thread, aggregate registers over resident
CTAs), a bandwidth floor on ``n`` that keeps enough bytes in flight to cover
the inherent memory latency, and the MMA shape rule (powers of two, at
least 16).  Solving runs offline per hardware target; the online selectors
are constant-time lookups.
"""

from __future__ import annotations

import bisect
import json
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources
from typing import Optional, Sequence

from .errors import EmptyFeasibleSet, MissingRegisterEntry
from .workload import WorkloadSpec

HW_PROFILE_ENV = "PREFIXPACK_HW_PROFILE"
DEFAULT_CANDIDATES = (16, 32, 64, 128, 256)


class Constraint(IntEnum):
    """Violation labels, numbered the way the feasibility table annotates
    rejected candidates."""

    CAPACITY = 1   # shared memory / registers
    BANDWIDTH = 2  # in-flight data floor on n
    SHAPE = 3      # power-of-two >= 16


@dataclass(frozen=True)
class HardwareModel:
    name: str
    num_sms: int
    smem_per_cta_bytes: int   # addressable by one CTA; also the per-SM carveout
    smem_per_sm_bytes: int    # physical shared-memory/L1 array per SM
    reg_per_thread_limit: int
    reg_file_per_sm: int      # 32-bit registers per SM
    bandwidth_bytes_per_ns: float
    inherent_latency_ns: float
    tensor_throughput: float  # fused multiply-add element-ops per ns per SM
    l2_bytes: int = 0

    def validate(self) -> None:
        positive = [
            self.num_sms,
            self.smem_per_cta_bytes,
            self.smem_per_sm_bytes,
            self.reg_per_thread_limit,
            self.reg_file_per_sm,
            self.bandwidth_bytes_per_ns,
            self.inherent_latency_ns,
            self.tensor_throughput,
        ]
        if any(x <= 0 for x in positive):
            raise ValueError("all hardware capacities must be positive")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "num_sms": self.num_sms,
            "smem_per_cta_bytes": self.smem_per_cta_bytes,
            "smem_per_sm_bytes": self.smem_per_sm_bytes,
            "reg_per_thread_limit": self.reg_per_thread_limit,
            "reg_file_per_sm": self.reg_file_per_sm,
            "bandwidth_bytes_per_ns": self.bandwidth_bytes_per_ns,
            "inherent_latency_ns": self.inherent_latency_ns,
            "tensor_throughput": self.tensor_throughput,
            "l2_bytes": self.l2_bytes,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "HardwareModel":
        hw = cls(
            name=doc.get("name", "custom"),
            num_sms=int(doc["num_sms"]),
            smem_per_cta_bytes=int(doc["smem_per_cta_bytes"]),
            smem_per_sm_bytes=int(doc["smem_per_sm_bytes"]),
            reg_per_thread_limit=int(doc["reg_per_thread_limit"]),
            reg_file_per_sm=int(doc["reg_file_per_sm"]),
            bandwidth_bytes_per_ns=float(doc["bandwidth_bytes_per_ns"]),
            inherent_latency_ns=float(doc["inherent_latency_ns"]),
            tensor_throughput=float(doc["tensor_throughput"]),
            l2_bytes=int(doc.get("l2_bytes", 0)),
        )
        hw.validate()
        return hw


def load_hardware_profile(path_or_name: Optional[str] = None) -> HardwareModel:
    """Load a hardware profile from an explicit path, the ``PREFIXPACK_HW_PROFILE``
    environment variable, or a bundled profile name (default ``a100``)."""
    target = path_or_name or os.environ.get(HW_PROFILE_ENV) or "a100"
    if os.path.exists(target):
        with open(target, "r", encoding="utf-8") as fh:
            return HardwareModel.from_json(json.load(fh))
    ref = resources.files("prefixpack").joinpath(f"profiles/{target}.json")
    if not ref.is_file():
        raise FileNotFoundError(f"no hardware profile at '{target}' and no bundled '{target}.json'")
    return HardwareModel.from_json(json.loads(ref.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class RegisterUsage:
    reg_per_thread: int
    reg_per_cta: int
    threads_per_cta: int


class RegisterUsageTable:
    """Measured (or synthetic) register footprints per tile candidate.

    Entries are opaque inputs produced by offline compilation elsewhere;
    nothing here recomputes them.
    """

    def __init__(self, entries: dict[tuple[int, int], RegisterUsage], synthetic: bool = False):
        self.entries = dict(entries)
        self.synthetic = synthetic

    def get(self, m: int, n: int) -> RegisterUsage:
        try:
            return self.entries[(m, n)]
        except KeyError:
            raise MissingRegisterEntry(f"no register data for tile ({m}, {n})") from None

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self.entries

    def to_json(self) -> dict:
        return {
            "synthetic": self.synthetic,
            "entries": [
                {
                    "m": m,
                    "n": n,
                    "reg_per_thread": u.reg_per_thread,
                    "reg_per_cta": u.reg_per_cta,
                    "threads_per_cta": u.threads_per_cta,
                }
                for (m, n), u in sorted(self.entries.items())
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RegisterUsageTable":
        entries = {
            (int(e["m"]), int(e["n"])): RegisterUsage(
                reg_per_thread=int(e["reg_per_thread"]),
                reg_per_cta=int(e["reg_per_cta"]),
                threads_per_cta=int(e["threads_per_cta"]),
            )
            for e in doc["entries"]
        }
        return cls(entries, synthetic=bool(doc.get("synthetic", False)))

    @classmethod
    def load(cls, path: Optional[str] = None) -> "RegisterUsageTable":
        if path is not None:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_json(json.load(fh))
        ref = resources.files("prefixpack").joinpath("profiles/registers_synthetic.json")
        return cls.from_json(json.loads(ref.read_text(encoding="utf-8")))


def synthetic_register_table(candidates: Sequence[int] = DEFAULT_CANDIDATES) -> RegisterUsageTable:
    """Placeholder register footprints for environments without a compiler
    toolchain; values grow with tile area and stay under typical limits."""
    entries = {}
    for m in candidates:
        for n in candidates:
            threads = 128 if m <= 32 else 256
            reg_thr = 32 + (m * n) // 256
            entries[(m, n)] = RegisterUsage(
                reg_per_thread=reg_thr,
                reg_per_cta=reg_thr * threads,
                threads_per_cta=threads,
            )
    return RegisterUsageTable(entries, synthetic=True)


@dataclass(frozen=True)
class TileConfig:
    m: int
    n: int
    concurrency: int  # resident CTAs per SM

    def key(self) -> tuple[int, int]:
        return (self.m, self.n)


@dataclass(frozen=True)
class RejectedConfig:
    m: int
    n: int
    violated: Constraint


@dataclass
class FeasibleSet:
    configs: list[TileConfig]
    rejected: list[RejectedConfig] = field(default_factory=list)

    def __post_init__(self):
        self._by_key = {c.key(): c for c in self.configs}

    @property
    def feasible_ms(self) -> list[int]:
        return sorted({c.m for c in self.configs})

    @property
    def max_m(self) -> int:
        if not self.configs:
            raise EmptyFeasibleSet("no feasible tile configurations")
        return max(c.m for c in self.configs)

    def ns_for_m(self, m: int) -> list[int]:
        return sorted(c.n for c in self.configs if c.m == m)

    def get(self, m: int, n: int) -> TileConfig:
        try:
            return self._by_key[(m, n)]
        except KeyError:
            raise EmptyFeasibleSet(f"tile ({m}, {n}) is not in the feasible set") from None

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._by_key

    def to_json(self) -> dict:
        return {
            "configs": [{"m": c.m, "n": c.n, "concurrency": c.concurrency} for c in self.configs],
            "rejected": [{"m": r.m, "n": r.n, "violated": int(r.violated)} for r in self.rejected],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FeasibleSet":
        return cls(
            configs=[
                TileConfig(m=int(c["m"]), n=int(c["n"]), concurrency=int(c["concurrency"]))
                for c in doc["configs"]
            ],
            rejected=[
                RejectedConfig(m=int(r["m"]), n=int(r["n"]), violated=Constraint(int(r["violated"])))
                for r in doc.get("rejected", [])
            ],
        )


def cta_smem_bytes(m: int, n: int, d: int, kv_bytes: int, inter_bytes: int) -> int:
    """Shared memory for one CTA: Q tile + K/V tile + intermediate tile."""
    return m * d * kv_bytes + n * d * kv_bytes + m * d * inter_bytes


def _is_valid_shape(x: int) -> bool:
    return x >= 16 and (x & (x - 1)) == 0


def derive_concurrency(
    cfg: tuple[int, int],
    hw: HardwareModel,
    regs: RegisterUsageTable,
    d: int,
    kv_bytes: int,
    inter_bytes: int,
) -> int:
    """Resident CTAs per SM for a tile candidate.

    Residency is bounded by the shared-memory carveout (the addressable
    per-CTA figure doubles as the per-SM budget usable by resident CTAs)
    and by the register file.  Zero marks the candidate as infeasible on
    its own.
    """
    m, n = cfg
    usage = regs.get(m, n)
    smem = cta_smem_bytes(m, n, d, kv_bytes, inter_bytes)
    if smem > hw.smem_per_cta_bytes or usage.reg_per_cta > hw.reg_file_per_sm:
        return 0
    c_smem = hw.smem_per_cta_bytes // smem
    c_reg = hw.reg_file_per_sm // usage.reg_per_cta
    return min(c_smem, c_reg)


def min_n_for_bandwidth(hw: HardwareModel, concurrency: int, d: int, kv_bytes: int) -> int:
    """Smallest KV tile that keeps enough data in flight to cover the
    inherent latency: n >= ceil(L*B / (S*C*d*b))."""
    return math.ceil(
        hw.inherent_latency_ns
        * hw.bandwidth_bytes_per_ns
        / (hw.num_sms * concurrency * d * kv_bytes)
    )


def classify_candidate(
    m: int,
    n: int,
    hw: HardwareModel,
    regs: RegisterUsageTable,
    d: int,
    kv_bytes: int,
    inter_bytes: int,
) -> tuple[Optional[Constraint], int]:
    """Return (first violated constraint or None, concurrency)."""
    if not (_is_valid_shape(m) and _is_valid_shape(n)):
        return Constraint.SHAPE, 0
    if (m, n) not in regs:
        raise MissingRegisterEntry(f"no register data for tile ({m}, {n})")
    usage = regs.get(m, n)
    smem = cta_smem_bytes(m, n, d, kv_bytes, inter_bytes)
    if smem > hw.smem_per_cta_bytes:
        return Constraint.CAPACITY, 0
    if usage.reg_per_thread > hw.reg_per_thread_limit:
        return Constraint.CAPACITY, 0
    concurrency = derive_concurrency((m, n), hw, regs, d, kv_bytes, inter_bytes)
    if concurrency < 1:
        return Constraint.CAPACITY, 0
    if n < min_n_for_bandwidth(hw, concurrency, d, kv_bytes):
        return Constraint.BANDWIDTH, concurrency
    return None, concurrency


def solve_feasible(
    hw: HardwareModel,
    regs: RegisterUsageTable,
    d: int,
    kv_bytes: int,
    inter_bytes: int,
    candidate_range: Optional[Sequence[int]] = None,
) -> FeasibleSet:
    """Evaluate every (m, n) candidate pair and split them into accepted
    configs (with derived concurrency) and rejected ones labeled with the
    first violated constraint."""
    candidates = tuple(candidate_range) if candidate_range is not None else DEFAULT_CANDIDATES
    accepted: list[TileConfig] = []
    rejected: list[RejectedConfig] = []
    for m in candidates:
        for n in candidates:
            violated, concurrency = classify_candidate(m, n, hw, regs, d, kv_bytes, inter_bytes)
            if violated is None:
                accepted.append(TileConfig(m=m, n=n, concurrency=concurrency))
            else:
                rejected.append(RejectedConfig(m=m, n=n, violated=violated))
    return FeasibleSet(configs=accepted, rejected=rejected)


def solve_feasible_for_spec(
    hw: HardwareModel,
    regs: RegisterUsageTable,
    spec: WorkloadSpec,
    candidate_range: Optional[Sequence[int]] = None,
) -> FeasibleSet:
    return solve_feasible(
        hw,
        regs,
        d=spec.head_dim,
        kv_bytes=spec.kv_dtype_bytes,
        inter_bytes=spec.intermediate_dtype_bytes,
        candidate_range=candidate_range,
    )


def select_q_tile(q: int, fs: FeasibleSet) -> int:
    """Round-up rule: smallest feasible m with m >= q.

    Padding wastes on-chip rows, but undershooting splits the pack and
    re-reads its shared KV, so the query count is rounded up, never down.
    Query counts above the largest feasible m return that maximum; callers
    pre-split such packs into ceil(q / m_max) groups.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    ms = fs.feasible_ms
    if not ms:
        raise EmptyFeasibleSet("no feasible tile configurations")
    for m in ms:
        if m >= q:
            return m
    return ms[-1]


@dataclass
class KvTileTree:
    """Piecewise-constant kv_len -> n map produced by offline calibration.

    ``breakpoints`` holds (kv_len_upper_bound, n) steps in increasing bound
    order; lengths beyond the last bound use ``default_n``.
    """

    breakpoints: list[tuple[int, int]]
    default_n: int

    def select(self, kv_len: int) -> int:
        bounds = [b for b, _ in self.breakpoints]
        idx = bisect.bisect_left(bounds, kv_len)
        if idx < len(self.breakpoints):
            return self.breakpoints[idx][1]
        return self.default_n

    def to_json(self) -> dict:
        return {
            "breakpoints": [[b, n] for b, n in self.breakpoints],
            "default_n": self.default_n,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "KvTileTree":
        return cls(
            breakpoints=[(int(b), int(n)) for b, n in doc["breakpoints"]],
            default_n=int(doc["default_n"]),
        )


def select_kv_tile(kv_len: int, tree: KvTileTree) -> int:
    return tree.select(kv_len)


DEFAULT_CALIBRATION_SWEEP = tuple(range(16, 1025, 16)) + tuple(range(1280, 16385, 256))


def calibrate_n_tree(
    fs: FeasibleSet,
    hw: HardwareModel,
    spec: WorkloadSpec,
    sweep: Optional[Sequence[int]] = None,
) -> KvTileTree:
    """Sweep KV lengths through the simulator and record the fastest n.

    Each probe simulates one single-query CTA at the round-up m, which
    exposes the final-tile compute bubble: an oversized n pays for compute
    on padded KV rows in its last tile, so short lengths prefer the largest
    n that still divides them.  Ties go to the larger n (at saturation the
    configurations are bandwidth-equivalent, and a larger tile lowers
    concurrency and with it the tail bubble).
    """
    from .simulator import CtaTask, simulate  # local import; simulator builds on tiles

    grid = tuple(sweep) if sweep is not None else DEFAULT_CALIBRATION_SWEEP
    m = select_q_tile(1, fs)
    candidate_ns = fs.ns_for_m(m)
    if not candidate_ns:
        raise EmptyFeasibleSet(f"no feasible n for m={m}")

    choices: list[tuple[int, int]] = []
    for kv_len in sorted(grid):
        best_n = None
        best_latency = None
        for n in candidate_ns:
            cfg = fs.get(m, n)
            task = CtaTask(
                queries=(0,),
                block_ids=(),
                kv_len=kv_len,
                cfg=cfg,
                stream_id=0,
            )
            report = simulate([task], hw, spec)
            latency = report.makespan
            if best_latency is None:
                best_latency, best_n = latency, n
                continue
            tol = 1e-9 * max(latency, best_latency)
            if latency < best_latency - tol:
                best_latency, best_n = latency, n
            elif latency <= best_latency + tol and n > best_n:
                # measured tie: the larger tile wins (lower concurrency,
                # smaller tail bubble)
                best_latency, best_n = min(latency, best_latency), n
        choices.append((kv_len, best_n))

    # Compress runs of identical choices into step bounds.
    breakpoints: list[tuple[int, int]] = []
    for i, (kv_len, n) in enumerate(choices):
        if i + 1 < len(choices) and choices[i + 1][1] == n:
            continue
        breakpoints.append((kv_len, n))
    default_n = breakpoints[-1][1] if breakpoints else candidate_ns[-1]
    if breakpoints:
        breakpoints = breakpoints[:-1]
    return KvTileTree(breakpoints=breakpoints, default_n=default_n)
