"""Kernel specifications, reference semantics, and program verification.

A KernelSpec describes one tiled-matmul call: result C (i x j) equals
A_eff (i x k) times B_eff (k x j), optionally plus or minus a bias D
(i x j).  Transpose flags describe how operands are laid out in DRAM:
a transposed operand is stored as the transpose of its logical shape.

The accelerator's compute path can only *add* a bias block, matching the
instruction set's `P = A*W + D`.  Subtracting kernels are therefore bound
with the bias buffer negated when a machine is prepared, standing in for
the negative load-scale factor real hardware would use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .isa import Program
from .machine import ExecError, Machine, MachineConfig, ShapeMismatch, create_machine, execute, read_output
from .program_text import ProgramSyntaxError, parse_program

REL_TOLERANCE = 1e-4
ABS_TOLERANCE = 1e-7


@dataclass(frozen=True)
class BufferDecl:
    rows: int
    cols: int
    role: str  # "input" | "output" | "bias"


@dataclass(frozen=True)
class KernelSpec:
    name: str
    op: str  # "matmul" | "matmul_bias"
    i: int
    k: int
    j: int
    transpose_a: bool = False
    transpose_b: bool = False
    sub: bool = False
    a: str = "A"
    b: str = "B"
    d: str | None = None
    c: str = "C"
    description: str = ""

    def __post_init__(self) -> None:
        if self.op not in ("matmul", "matmul_bias"):
            raise ValueError(f"unknown op '{self.op}'")
        if min(self.i, self.k, self.j) < 1:
            raise ValueError("dimensions must be positive")
        if self.op == "matmul_bias" and self.d is None:
            raise ValueError("matmul_bias requires a bias buffer name")
        if self.op == "matmul" and (self.d is not None or self.sub):
            raise ValueError("plain matmul takes no bias")

    @property
    def a_shape(self) -> tuple[int, int]:
        return (self.k, self.i) if self.transpose_a else (self.i, self.k)

    @property
    def b_shape(self) -> tuple[int, int]:
        return (self.j, self.k) if self.transpose_b else (self.k, self.j)

    @property
    def c_shape(self) -> tuple[int, int]:
        return (self.i, self.j)

    def buffer_table(self) -> dict[str, BufferDecl]:
        table = {
            self.a: BufferDecl(*self.a_shape, "input"),
            self.b: BufferDecl(*self.b_shape, "input"),
        }
        if self.d is not None:
            table[self.d] = BufferDecl(self.i, self.j, "bias")
        table[self.c] = BufferDecl(self.i, self.j, "output")
        return table

    def buffer_shapes(self) -> dict[str, tuple[int, int]]:
        return {name: (decl.rows, decl.cols) for name, decl in self.buffer_table().items()}


def _check_shape(name: str, arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.shape != shape:
        raise ShapeMismatch(f"operand '{name}' expects shape {shape}, got {arr.shape}")
    return arr


def reference_matmul(
    a: np.ndarray,
    b: np.ndarray,
    i: int,
    k: int,
    j: int,
    transpose_a: bool = False,
    transpose_b: bool = False,
) -> np.ndarray:
    """C[i][j] = sum_k A_eff[i][k] * B_eff[k][j], in float32."""
    a = _check_shape("A", a, (k, i) if transpose_a else (i, k))
    b = _check_shape("B", b, (j, k) if transpose_b else (k, j))
    a_eff = a.T if transpose_a else a
    b_eff = b.T if transpose_b else b
    return (a_eff @ b_eff).astype(np.float32)


def reference_matmul_bias(
    a: np.ndarray,
    b: np.ndarray,
    d: np.ndarray,
    i: int,
    k: int,
    j: int,
    transpose_a: bool = False,
    transpose_b: bool = False,
    sub: bool = False,
) -> np.ndarray:
    """Matmul with a bias added, or subtracted when `sub` is set."""
    d = _check_shape("D", d, (i, j))
    product = reference_matmul(a, b, i, k, j, transpose_a, transpose_b)
    return (product - d if sub else product + d).astype(np.float32)


def evaluate_reference(spec: KernelSpec, inputs: dict[str, np.ndarray]) -> np.ndarray:
    if spec.op == "matmul":
        return reference_matmul(
            inputs[spec.a], inputs[spec.b], spec.i, spec.k, spec.j, spec.transpose_a, spec.transpose_b
        )
    assert spec.d is not None
    return reference_matmul_bias(
        inputs[spec.a],
        inputs[spec.b],
        inputs[spec.d],
        spec.i,
        spec.k,
        spec.j,
        spec.transpose_a,
        spec.transpose_b,
        spec.sub,
    )


@dataclass
class TestCase:
    inputs: dict[str, np.ndarray]
    expected: np.ndarray
    seed: int


def generate_testcases(spec: KernelSpec, seed: int, count: int = 5) -> list[TestCase]:
    """Draw `count` cases with integer-valued float32 entries in [-8, 8].

    Small integer data keeps float32 arithmetic exact, so verification can
    compare bit-for-bit.
    """
    rng = np.random.default_rng(seed)
    cases = []
    for index in range(count):
        inputs = {}
        for name, decl in spec.buffer_table().items():
            if decl.role == "output":
                continue
            values = rng.integers(-8, 9, size=(decl.rows, decl.cols))
            inputs[name] = values.astype(np.float32)
        cases.append(TestCase(inputs=inputs, expected=evaluate_reference(spec, inputs), seed=seed + index))
    return cases


# -- verification -------------------------------------------------------------


@dataclass(frozen=True)
class ParseFailure:
    message: str


@dataclass(frozen=True)
class ExecFailure:
    index: int
    kind: str
    message: str


@dataclass(frozen=True)
class WrongResult:
    position: tuple[int, int]
    got: float
    want: float


@dataclass
class CaseOutcome:
    index: int
    passed: bool
    failure: ExecFailure | WrongResult | None = None


@dataclass
class Verdict:
    passed: bool
    failure: ParseFailure | ExecFailure | WrongResult | None = None
    cases: list[CaseOutcome] = field(default_factory=list)


def machine_for_case(spec: KernelSpec, case: TestCase, cfg: MachineConfig | None = None) -> Machine:
    """Bind a test case's inputs into a fresh machine.

    Bias buffers are negated for subtracting kernels; see the module
    docstring.
    """
    contents = dict(case.inputs)
    if spec.sub and spec.d is not None and spec.d in contents:
        contents[spec.d] = -contents[spec.d]
    return create_machine(cfg, spec.buffer_shapes(), contents)


def _integer_valued(case: TestCase) -> bool:
    return all(np.array_equal(arr, np.trunc(arr)) for arr in case.inputs.values())


def _compare(got: np.ndarray, want: np.ndarray, exact: bool) -> tuple[int, int] | None:
    if exact:
        mismatch = got != want
    else:
        mismatch = ~np.isclose(got, want, rtol=REL_TOLERANCE, atol=ABS_TOLERANCE)
    if not mismatch.any():
        return None
    r, c = np.argwhere(mismatch)[0]
    return int(r), int(c)


def verify_case(p: Program, spec: KernelSpec, case: TestCase, cfg: MachineConfig) -> CaseOutcome:
    machine = machine_for_case(spec, case, cfg)
    try:
        execute(machine, p)
    except ExecError as e:
        return CaseOutcome(index=0, passed=False, failure=ExecFailure(e.index, e.kind, e.detail))
    got = read_output(machine, spec.c)
    position = _compare(got, case.expected, exact=_integer_valued(case))
    if position is None:
        return CaseOutcome(index=0, passed=True)
    r, c = position
    return CaseOutcome(
        index=0,
        passed=False,
        failure=WrongResult(position, float(got[r, c]), float(case.expected[r, c])),
    )


def verify_program(p: Program, spec: KernelSpec, cases: list[TestCase], cfg: MachineConfig | None = None) -> Verdict:
    """Run every case; fail fast on the first case that does not pass."""
    cfg = cfg or MachineConfig()
    verdict = Verdict(passed=True)
    for index, case in enumerate(cases):
        outcome = verify_case(p, spec, case, cfg)
        outcome.index = index
        verdict.cases.append(outcome)
        if not outcome.passed:
            verdict.passed = False
            verdict.failure = outcome.failure
            break
    return verdict


def verify_source(text: str, spec: KernelSpec, cases: list[TestCase], cfg: MachineConfig | None = None) -> Verdict:
    """Parse program text against the spec's buffer table, then verify."""
    try:
        program = parse_program(text, spec.buffer_shapes())
    except ProgramSyntaxError as e:
        return Verdict(passed=False, failure=ParseFailure(str(e)))
    return verify_program(program, spec, cases, cfg)
