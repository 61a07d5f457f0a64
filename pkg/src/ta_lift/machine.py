"""Functional simulator for the accelerator.

State is a set of named 2-D float32 DRAM buffers, a scratchpad and an
accumulator (both row-addressed, DIM elements wide), configuration
registers, and the latched weights/output-address pair left by the most
recent preload.  Execution is sequential; every error carries the index of
the offending instruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .isa import (
    Activation,
    ComputeAccumulated,
    ComputePreloaded,
    ConfigEx,
    ConfigLd,
    ConfigSt,
    Dataflow,
    Fence,
    Mvin,
    Mvout,
    Preload,
    PreloadZeros,
    Program,
    Space,
    ValidationError,
    validate_program,
)

ELEMENT_BYTES = 4


class ConfigInvalid(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class ExecError(Exception):
    """Execution failure at a specific instruction."""

    def __init__(self, index: int, kind: str, message: str):
        super().__init__(f"instruction {index}: {kind}: {message}")
        self.index = index
        self.kind = kind
        self.detail = message


@dataclass(frozen=True)
class MachineConfig:
    dim: int = 4
    spad_rows: int = 1024
    acc_rows: int = 256
    max_block_len: int = 4

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ConfigInvalid(f"dim must be at least 1, got {self.dim}")
        if self.spad_rows < self.dim or self.acc_rows < self.dim:
            raise ConfigInvalid("local memories must hold at least one full tile of rows")
        if self.max_block_len < 1:
            raise ConfigInvalid("max_block_len must be at least 1")


@dataclass
class _ExecRegs:
    dataflow: Dataflow = Dataflow.WEIGHT_STATIONARY
    act: Activation = Activation.NONE
    a_transpose: bool = False
    b_transpose: bool = False


@dataclass
class _Latched:
    weights: np.ndarray  # post-transpose W block
    c_raw: int
    c_row: int
    c_accumulate: bool
    c_cols: int
    c_rows: int


@dataclass
class Machine:
    config: MachineConfig
    dram: dict[str, np.ndarray]
    spad: np.ndarray
    acc: np.ndarray
    regs: _ExecRegs = field(default_factory=_ExecRegs)
    ld_strides: dict[int, int | None] = field(default_factory=lambda: {0: None, 1: None, 2: None})
    st_stride: int | None = None
    latched: _Latched | None = None
    dram_bytes_in: int = 0
    dram_bytes_out: int = 0


def create_machine(
    cfg: MachineConfig | None,
    shapes: dict[str, tuple[int, int]],
    contents: dict[str, np.ndarray] | None = None,
) -> Machine:
    """Build a machine with the given DRAM buffers.

    Buffers named in `shapes` but absent from `contents` start zeroed.
    """
    cfg = cfg or MachineConfig()
    contents = contents or {}
    for name in contents:
        if name not in shapes:
            raise ShapeMismatch(f"contents given for undeclared buffer '{name}'")
    dram: dict[str, np.ndarray] = {}
    for name, (rows, cols) in shapes.items():
        if rows < 1 or cols < 1:
            raise ShapeMismatch(f"buffer '{name}' has degenerate shape ({rows}, {cols})")
        if name in contents:
            arr = np.asarray(contents[name], dtype=np.float32)
            if arr.shape != (rows, cols):
                raise ShapeMismatch(f"buffer '{name}' expects shape ({rows}, {cols}), got {arr.shape}")
            dram[name] = arr.copy()
        else:
            dram[name] = np.zeros((rows, cols), dtype=np.float32)
    spad = np.zeros((cfg.spad_rows, cfg.dim), dtype=np.float32)
    acc = np.zeros((cfg.acc_rows, cfg.dim), dtype=np.float32)
    return Machine(cfg, dram, spad, acc)


def _stride_elems(m: Machine, idx: int, stride_bytes: int | None, what: str) -> int:
    if stride_bytes is None:
        raise ExecError(idx, "unsupported", f"{what} stride used before being configured")
    if stride_bytes % ELEMENT_BYTES != 0:
        raise ExecError(idx, "unsupported", f"{what} stride {stride_bytes} is not a multiple of {ELEMENT_BYTES}")
    return stride_bytes // ELEMENT_BYTES


def _local_mem(m: Machine, space: Space) -> np.ndarray:
    return m.acc if space is Space.ACCUMULATOR else m.spad


def _check_local_rows(m: Machine, idx: int, space: Space, row: int, nrows: int) -> None:
    limit = m.config.acc_rows if space is Space.ACCUMULATOR else m.config.spad_rows
    kind = "acc_out_of_range" if space is Space.ACCUMULATOR else "spad_out_of_range"
    if row < 0 or row + nrows > limit:
        raise ExecError(idx, kind, f"rows [{row}, {row + nrows}) exceed {limit}")


def _dram_flat(m: Machine, idx: int, buffer: str) -> np.ndarray:
    if buffer not in m.dram:
        raise ExecError(idx, "dram_out_of_range", f"unknown buffer '{buffer}'")
    return m.dram[buffer].reshape(-1)


def _exec_mvin(m: Machine, idx: int, ins: Mvin) -> None:
    dim = m.config.dim
    pitch = _stride_elems(m, idx, m.ld_strides.get(ins.channel), f"load channel {ins.channel}")
    flat = _dram_flat(m, idx, ins.dram.buffer)
    space = ins.local.space
    mem = _local_mem(m, space)
    tiles = (ins.cols + dim - 1) // dim
    base_row = ins.local.row
    _check_local_rows(m, idx, space, base_row, (tiles - 1) * dim + ins.rows)
    accumulate = space is Space.ACCUMULATOR and ins.local.accumulate
    for t in range(tiles):
        width = min(dim, ins.cols - t * dim)
        for r in range(ins.rows):
            src = ins.dram.offset + r * pitch + t * dim
            if src < 0 or src + width > flat.size:
                raise ExecError(
                    idx,
                    "dram_out_of_range",
                    f"read [{src}, {src + width}) exceeds buffer '{ins.dram.buffer}' of {flat.size} elements",
                )
            dst = base_row + t * dim + r
            if accumulate:
                mem[dst, :width] += flat[src : src + width]
            else:
                mem[dst, :width] = flat[src : src + width]
    m.dram_bytes_in += ELEMENT_BYTES * ins.cols * ins.rows


def _exec_preload(m: Machine, idx: int, ins: Preload) -> None:
    if not ins.b.is_sentinel:
        _check_local_rows(m, idx, Space.SCRATCHPAD, ins.b.row, ins.b_rows)
        block = m.spad[ins.b.row : ins.b.row + ins.b_rows, : ins.b_cols].copy()
        weights = block.T.copy() if m.regs.b_transpose else block
    else:
        if m.latched is None:
            raise ExecError(idx, "compute_before_preload", "keep-weights preload with no previously latched weights")
        weights = m.latched.weights
    m.latched = _Latched(
        weights=weights,
        c_raw=ins.c.raw,
        c_row=ins.c.row,
        c_accumulate=ins.c.accumulate,
        c_cols=ins.c_cols,
        c_rows=ins.c_rows,
    )


def _exec_preload_zeros(m: Machine, idx: int, ins: PreloadZeros) -> None:
    dim = m.config.dim
    m.latched = _Latched(
        weights=np.zeros((dim, dim), dtype=np.float32),
        c_raw=ins.c.raw,
        c_row=ins.c.row,
        c_accumulate=ins.c.accumulate,
        c_cols=dim,
        c_rows=dim,
    )


def _exec_compute(m: Machine, idx: int, ins: ComputePreloaded | ComputeAccumulated) -> None:
    if m.regs.dataflow is not Dataflow.WEIGHT_STATIONARY:
        raise ExecError(idx, "unsupported", f"dataflow {m.regs.dataflow.value} is parse-only")
    if m.regs.act not in (Activation.NONE, Activation.RELU):
        raise ExecError(idx, "unsupported", f"activation {m.regs.act.value} is parse-only")
    lat = m.latched
    if lat is None:
        raise ExecError(idx, "compute_before_preload", "compute issued before any preload")
    _check_local_rows(m, idx, Space.SCRATCHPAD, ins.a.row, ins.a_rows)
    a_raw = m.spad[ins.a.row : ins.a.row + ins.a_rows, : ins.a_cols]
    a_eff = a_raw.T if m.regs.a_transpose else a_raw
    if a_eff.shape[1] != lat.weights.shape[0]:
        raise ExecError(
            idx,
            "dimension_mismatch",
            f"A is {a_eff.shape[0]}x{a_eff.shape[1]} but weights are "
            f"{lat.weights.shape[0]}x{lat.weights.shape[1]}",
        )
    product = a_eff.astype(np.float32) @ lat.weights
    if product.shape != (lat.c_rows, lat.c_cols):
        raise ExecError(
            idx,
            "dimension_mismatch",
            f"result is {product.shape[0]}x{product.shape[1]} but the preload latched "
            f"{lat.c_rows}x{lat.c_cols}",
        )
    if ins.d.is_sentinel:
        biased = product
    else:
        _check_local_rows(m, idx, Space.SCRATCHPAD, ins.d.row, ins.d_rows)
        bias = m.spad[ins.d.row : ins.d.row + ins.d_rows, : ins.d_cols]
        if bias.shape != product.shape:
            raise ExecError(
                idx,
                "dimension_mismatch",
                f"bias is {ins.d_rows}x{ins.d_cols} but the result is {lat.c_rows}x{lat.c_cols}",
            )
        biased = product + bias
    _check_local_rows(m, idx, Space.ACCUMULATOR, lat.c_row, lat.c_rows)
    dst = m.acc[lat.c_row : lat.c_row + lat.c_rows, : lat.c_cols]
    accumulate = lat.c_accumulate or isinstance(ins, ComputeAccumulated)
    if accumulate:
        dst += biased
    else:
        dst[...] = biased


def _exec_mvout(m: Machine, idx: int, ins: Mvout) -> None:
    dim = m.config.dim
    pitch = _stride_elems(m, idx, m.st_stride, "store")
    if m.regs.act not in (Activation.NONE, Activation.RELU) and not ins.local.full_width:
        raise ExecError(idx, "unsupported", f"activation {m.regs.act.value} is parse-only")
    flat = _dram_flat(m, idx, ins.dram.buffer)
    tiles = (ins.cols + dim - 1) // dim
    base_row = ins.local.row
    _check_local_rows(m, idx, Space.ACCUMULATOR, base_row, (tiles - 1) * dim + ins.rows)
    apply_relu = m.regs.act is Activation.RELU and not ins.local.full_width
    for t in range(tiles):
        width = min(dim, ins.cols - t * dim)
        for r in range(ins.rows):
            src_row = base_row + t * dim + r
            values = m.acc[src_row, :width]
            if apply_relu:
                values = np.maximum(values, np.float32(0.0))
            dst = ins.dram.offset + r * pitch + t * dim
            if dst < 0 or dst + width > flat.size:
                raise ExecError(
                    idx,
                    "dram_out_of_range",
                    f"write [{dst}, {dst + width}) exceeds buffer '{ins.dram.buffer}' of {flat.size} elements",
                )
            flat[dst : dst + width] = values
    m.dram_bytes_out += ELEMENT_BYTES * ins.cols * ins.rows


def execute(m: Machine, p: Program) -> Machine:
    """Run a program to completion, mutating and returning the machine."""
    try:
        validate_program(p, dim=m.config.dim, max_block_len=m.config.max_block_len)
    except ValidationError as e:
        raise ExecError(e.index, e.kind, e.detail) from None
    for idx, ins in enumerate(p.instructions):
        if isinstance(ins, ConfigEx):
            m.regs.dataflow = ins.dataflow
            m.regs.act = ins.act
            m.regs.a_transpose = ins.a_transpose
            m.regs.b_transpose = ins.b_transpose
        elif isinstance(ins, ConfigLd):
            m.ld_strides[ins.channel] = ins.stride_bytes
        elif isinstance(ins, ConfigSt):
            m.st_stride = ins.stride_bytes
        elif isinstance(ins, Mvin):
            _exec_mvin(m, idx, ins)
        elif isinstance(ins, Preload):
            _exec_preload(m, idx, ins)
        elif isinstance(ins, PreloadZeros):
            _exec_preload_zeros(m, idx, ins)
        elif isinstance(ins, (ComputePreloaded, ComputeAccumulated)):
            _exec_compute(m, idx, ins)
        elif isinstance(ins, Mvout):
            _exec_mvout(m, idx, ins)
        elif isinstance(ins, Fence):
            pass  # sequential semantics: nothing outstanding to wait on
        else:
            raise ExecError(idx, "unsupported", f"unknown instruction {ins!r}")
    return m


def read_output(m: Machine, buffer: str) -> np.ndarray:
    """Return a copy of a DRAM buffer as a (rows, cols) matrix."""
    if buffer not in m.dram:
        raise ShapeMismatch(f"unknown buffer '{buffer}'")
    return m.dram[buffer].copy()
