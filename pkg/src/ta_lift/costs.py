"""Static cost model over accelerator programs.

Every instruction pays a fixed issue cost. Data movers additionally pay per
byte transferred, preloads pay the array fill latency, and computes pay per
row fed through the array. The totals are deliberately simple: they are a
ranking signal for the optimizer, not a timing model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import (
    ComputeAccumulated,
    ComputePreloaded,
    ConfigEx,
    ConfigLd,
    ConfigSt,
    Fence,
    Instruction,
    Mvin,
    Mvout,
    Preload,
    PreloadZeros,
    Program,
)
from .machine import ELEMENT_BYTES


@dataclass(frozen=True)
class CostParams:
    """Weights for the per-instruction cost terms."""

    issue: float = 1.0
    byte_cost: float = 0.25
    pipeline_fill: float = 4.0
    row_cost: float = 1.0


def instruction_kind(ins: Instruction) -> str:
    """The macro name an instruction renders as."""
    if isinstance(ins, Mvin):
        return ("mvin", "mvin2", "mvin3")[ins.channel]
    return {
        ConfigEx: "config_ex",
        ConfigLd: "config_ld",
        ConfigSt: "config_st",
        Preload: "preload",
        PreloadZeros: "preload_zeros",
        ComputePreloaded: "compute_preloaded",
        ComputeAccumulated: "compute_accumulated",
        Mvout: "mvout",
        Fence: "fence",
    }[type(ins)]


def instruction_cost(ins: Instruction, params: CostParams | None = None) -> float:
    params = params or CostParams()
    cost = params.issue
    if isinstance(ins, (Mvin, Mvout)):
        cost += params.byte_cost * ELEMENT_BYTES * ins.cols * ins.rows
    elif isinstance(ins, (Preload, PreloadZeros)):
        cost += params.pipeline_fill
    elif isinstance(ins, (ComputePreloaded, ComputeAccumulated)):
        cost += params.row_cost * ins.a_rows
    return cost


@dataclass(frozen=True)
class CostReport:
    """Cost totals for one program, split by instruction kind."""

    total: float
    breakdown: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    dram_bytes_in: int = 0
    dram_bytes_out: int = 0


def program_cost(program: Program, params: CostParams | None = None) -> CostReport:
    params = params or CostParams()
    breakdown: dict[str, float] = {}
    counts: dict[str, int] = {}
    bytes_in = 0
    bytes_out = 0
    total = 0.0
    for ins in program.instructions:
        kind = instruction_kind(ins)
        cost = instruction_cost(ins, params)
        breakdown[kind] = breakdown.get(kind, 0.0) + cost
        counts[kind] = counts.get(kind, 0) + 1
        total += cost
        if isinstance(ins, Mvin):
            bytes_in += ELEMENT_BYTES * ins.cols * ins.rows
        elif isinstance(ins, Mvout):
            bytes_out += ELEMENT_BYTES * ins.cols * ins.rows
    return CostReport(
        total=total,
        breakdown=breakdown,
        counts=counts,
        dram_bytes_in=bytes_in,
        dram_bytes_out=bytes_out,
    )


def render_feedback(before: CostReport, after: CostReport) -> str:
    """Human-readable summary of how a rewrite changed the cost picture."""
    lines = []
    for kind in sorted(set(before.counts) | set(after.counts)):
        took = before.counts.get(kind, 0)
        now = after.counts.get(kind, 0)
        if took != now:
            lines.append(f"{kind}: {took} -> {now}")
    lines.append(f"bytes in: {before.dram_bytes_in} -> {after.dram_bytes_in}")
    lines.append(f"bytes out: {before.dram_bytes_out} -> {after.dram_bytes_out}")
    lines.append(f"cost: {before.total:g} -> {after.total:g}")
    lines.append(f"\N{GREEK CAPITAL LETTER DELTA}total: {after.total - before.total:+g}")
    return "\n".join(lines) + "\n"
