"""Acceptance and timing accounting, plus CSV/JSON report emission.

Counters are derived from per-round acceptance events: count_at_least[i] is
the number of rounds whose acceptance reached draft position i, which makes
the chain-rule decomposition of deep acceptance an exact identity on the
counters. Positional acceptance (pos-acc) at i is the ratio of consecutive
counters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

POSACC_SCHEMA = "specdesk.posacc.v1"
TIMING_SCHEMA = "specdesk.timing.v1"
REPORT_SCHEMA = "specdesk.report.v1"
SWEEP_SCHEMA = "specdesk.sweep.v1"


class MeasurementError(RuntimeError):
    """A timing measurement cannot produce a meaningful ratio."""


@dataclass
class RoundRecord:
    round_index: int
    accepts: list[bool]          # A_1..A_L, prefix-monotone
    committed: int               # accepted drafts + 1 bonus token
    draft_ns: int
    verify_ns: int
    commit_ns: int
    wall_ns: int
    specialist_ns: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        flags = list(self.accepts)
        for earlier, later in zip(flags, flags[1:]):
            if later and not earlier:
                raise ContractError("acceptance events must be prefix-monotone")
        if self.committed != sum(flags) + 1:
            raise ContractError(
                f"committed {self.committed} != accepted {sum(flags)} + 1")


@dataclass
class AcceptCounters:
    depth: int
    rounds: int
    count_at_least: list[int]    # index i-1 holds count for position i

    @classmethod
    def from_records(cls, records: list[RoundRecord]) -> "AcceptCounters":
        if not records:
            raise ContractError("cannot build counters from zero rounds")
        depth = max(len(r.accepts) for r in records)
        counts = [0] * depth
        for r in records:
            accepted = sum(r.accepts)
            for i in range(accepted):
                counts[i] += 1
        return cls(depth, len(records), counts)

    def merge(self, other: "AcceptCounters") -> "AcceptCounters":
        depth = max(self.depth, other.depth)
        counts = [0] * depth
        for src in (self, other):
            for i, c in enumerate(src.count_at_least):
                counts[i] += c
        return AcceptCounters(depth, self.rounds + other.rounds, counts)


def pos_acc(counters: AcceptCounters, i: int) -> float | None:
    """P(A_i | A_{i-1}) as a counter ratio; None when undefined (0 denominator)."""
    if i < 2:
        raise ContractError(f"pos_acc is defined for positions >= 2, got {i}")
    if i > counters.depth:
        raise ContractError(f"position {i} exceeds depth {counters.depth}")
    prev = counters.count_at_least[i - 2]
    if prev == 0:
        return None
    return counters.count_at_least[i - 1] / prev


def accept_probability(counters: AcceptCounters, i: int = 1) -> float:
    """P(A_i) over all rounds."""
    return counters.count_at_least[i - 1] / counters.rounds


def chain_check(counters: AcceptCounters, k: int) -> float:
    """|P(A_1..A_k) - P(A_1) * prod pos_acc_i|; an identity on counters."""
    if k < 1 or k > counters.depth:
        raise ContractError(f"k must be in 1..{counters.depth}, got {k}")
    lhs = counters.count_at_least[k - 1] / counters.rounds
    rhs = accept_probability(counters, 1)
    for i in range(2, k + 1):
        ratio = pos_acc(counters, i)
        rhs *= 0.0 if ratio is None else ratio
    return abs(lhs - rhs)


def avg_accept_length(records: list[RoundRecord]) -> float:
    """Mean committed tokens per round (tau)."""
    if not records:
        raise ContractError("tau needs at least one round")
    return float(np.mean([r.committed for r in records]))


@dataclass
class RunReport:
    schema: str
    config: dict
    tau: float
    pos_acc: list[float | None]      # positions 2..depth
    p_accept_first: float
    rounds: int
    total_tokens: int
    throughput: dict                 # {tokens_per_second, raw_runs: [...]}
    speedup: float | None
    timing: dict                     # totals in ms + coverage
    counters: dict                   # {depth, rounds, count_at_least}
    round_rows: list[dict]           # per-round committed + phase ms

    def to_json(self) -> str:
        return json.dumps({
            "schema": self.schema, "config": self.config, "tau": self.tau,
            "pos_acc": self.pos_acc, "p_accept_first": self.p_accept_first,
            "rounds": self.rounds, "total_tokens": self.total_tokens,
            "throughput": self.throughput, "speedup": self.speedup,
            "timing": self.timing, "counters": self.counters,
            "round_rows": self.round_rows,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        raw = json.loads(text)
        return cls(**raw)


def build_report(config: dict, records: list[RoundRecord], wall_ns: int,
                 new_tokens: int, raw_runs: list[dict] | None = None,
                 vanilla_tokens_per_second: float | None = None) -> RunReport:
    counters = AcceptCounters.from_records(records)
    depth = counters.depth
    draft_ms = sum(r.draft_ns for r in records) / 1e6
    verify_ms = sum(r.verify_ns for r in records) / 1e6
    commit_ms = sum(r.commit_ns for r in records) / 1e6
    wall_rounds_ms = sum(r.wall_ns for r in records) / 1e6
    coverage = ((draft_ms + verify_ms + commit_ms) / wall_rounds_ms
                if wall_rounds_ms > 0 else 1.0)
    seconds = wall_ns / 1e9
    if seconds <= 0:
        raise MeasurementError("zero-duration run")
    tps = new_tokens / seconds
    speedup_ratio = (tps / vanilla_tokens_per_second
                     if vanilla_tokens_per_second else None)
    specialists: dict[str, float] = {}
    for r in records:
        for sid, ns in r.specialist_ns.items():
            specialists[str(sid)] = specialists.get(str(sid), 0.0) + ns / 1e6
    return RunReport(
        schema=REPORT_SCHEMA,
        config=dict(config),
        tau=avg_accept_length(records),
        pos_acc=[pos_acc(counters, i) for i in range(2, depth + 1)],
        p_accept_first=accept_probability(counters, 1),
        rounds=counters.rounds,
        total_tokens=new_tokens,
        throughput={"tokens_per_second": tps, "seconds": seconds,
                    "raw_runs": raw_runs or []},
        speedup=speedup_ratio,
        timing={"draft_ms": draft_ms, "verify_ms": verify_ms,
                "commit_ms": commit_ms, "round_wall_ms": wall_rounds_ms,
                "coverage": coverage, "specialist_ms": specialists},
        counters={"depth": depth, "rounds": counters.rounds,
                  "count_at_least": counters.count_at_least},
        round_rows=[{"round": r.round_index, "committed": r.committed,
                     "draft_ms": r.draft_ns / 1e6, "verify_ms": r.verify_ns / 1e6,
                     "commit_ms": r.commit_ns / 1e6} for r in records],
    )


def speedup(run: RunReport, vanilla_run: RunReport) -> float:
    """Throughput ratio against the vanilla baseline."""
    denom = vanilla_run.throughput["tokens_per_second"]
    if denom <= 0 or run.throughput["seconds"] <= 0:
        raise MeasurementError("cannot compute a speed-up from zero throughput")
    return run.throughput["tokens_per_second"] / denom


def write_posacc_csv(report: RunReport, path) -> None:
    counters = report.counters
    with open(path, "w") as f:
        f.write(f"# schema: {POSACC_SCHEMA}\n")
        f.write("position,pos_acc,count_at_least\n")
        for i in range(2, counters["depth"] + 1):
            ratio = report.pos_acc[i - 2]
            val = "nan" if ratio is None else f"{ratio:.10g}"
            f.write(f"{i},{val},{counters['count_at_least'][i - 1]}\n")


def write_timing_csv(report: RunReport, path) -> None:
    with open(path, "w") as f:
        f.write(f"# schema: {TIMING_SCHEMA}\n")
        f.write("round,committed,draft_ms,verify_ms,commit_ms\n")
        for row in report.round_rows:
            f.write(f"{row['round']},{row['committed']},{row['draft_ms']:.9g},"
                    f"{row['verify_ms']:.9g},{row['commit_ms']:.9g}\n")


def emit_report(report: RunReport, fmt: str, path) -> None:
    """Write one JSON document, or the pos-acc + timing CSV pair."""
    if fmt == "json":
        with open(path, "w") as f:
            f.write(report.to_json())
    elif fmt == "csv":
        base = str(path)
        stem = base[:-4] if base.endswith(".csv") else base
        write_posacc_csv(report, stem + ".posacc.csv")
        write_timing_csv(report, stem + ".timing.csv")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path) -> RunReport:
    with open(path) as f:
        return RunReport.from_json(f.read())
