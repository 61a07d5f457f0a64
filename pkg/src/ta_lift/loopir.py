"""A small affine loop-nest IR in the seq-loop dialect.

Kernels are Python-style nests of `for v in seq(lo, hi):` loops over
f32 DRAM arrays, with plain assignments and `+=` accumulations at the
leaves.  Bounds are compile-time constants, so every access can be
bounds-checked by interval analysis at parse time, and extents can be
swapped consistently to produce small clones that interpret quickly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


class KernelSyntaxError(ValueError):
    """Malformed kernel text."""


class NonConstantBound(KernelSyntaxError):
    """A loop bound or extent is not an integer literal."""


class BoundsError(ValueError):
    """An array access can fall outside the declared extents."""


class ShapeMismatch(ValueError):
    """Interpreter inputs do not match the declared arrays."""


class SignatureMismatch(ValueError):
    """Two kernels disagree on array names or extents."""


# -- expressions ---------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: int | float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Read:
    array: str
    indices: tuple["Expr", ...]


@dataclass(frozen=True)
class BinOp:
    op: str  # "+", "-", "*"
    left: "Expr"
    right: "Expr"


Expr = Const | Var | Read | BinOp


@dataclass(frozen=True)
class Assign:
    array: str
    indices: tuple[Expr, ...]
    rhs: Expr


@dataclass(frozen=True)
class Accumulate:
    array: str
    indices: tuple[Expr, ...]
    rhs: Expr


@dataclass(frozen=True)
class Loop:
    var: str
    lo: int
    hi: int
    body: tuple["Statement", ...]


Statement = Loop | Assign | Accumulate


@dataclass(frozen=True)
class ArrayDecl:
    name: str
    extents: tuple[int, ...]


@dataclass(frozen=True)
class LoopNest:
    name: str
    arrays: tuple[ArrayDecl, ...]
    body: tuple[Statement, ...]


# -- expression helpers --------------------------------------------------------


def plus(left: Expr, right: Expr) -> Expr:
    if isinstance(left, Const) and isinstance(right, Const):
        return Const(left.value + right.value)
    if isinstance(left, Const) and left.value == 0:
        return right
    if isinstance(right, Const) and right.value == 0:
        return left
    return BinOp("+", left, right)


def times(left: Expr, right: Expr) -> Expr:
    if isinstance(left, Const) and isinstance(right, Const):
        return Const(left.value * right.value)
    if (isinstance(left, Const) and left.value == 0) or (
        isinstance(right, Const) and right.value == 0
    ):
        return Const(0)
    if isinstance(left, Const) and left.value == 1:
        return right
    if isinstance(right, Const) and right.value == 1:
        return left
    return BinOp("*", left, right)


def substitute(expr: Expr, var: str, replacement: Expr) -> Expr:
    if isinstance(expr, Const):
        return expr
    if isinstance(expr, Var):
        return replacement if expr.name == var else expr
    if isinstance(expr, Read):
        return Read(expr.array, tuple(substitute(i, var, replacement) for i in expr.indices))
    left = substitute(expr.left, var, replacement)
    right = substitute(expr.right, var, replacement)
    if left is expr.left and right is expr.right:
        return expr
    if expr.op == "+":
        return plus(left, right)
    if expr.op == "*":
        return times(left, right)
    if isinstance(left, Const) and isinstance(right, Const):
        return Const(left.value - right.value)
    return BinOp("-", left, right)


def substitute_stmt(stmt: Statement, var: str, replacement: Expr) -> Statement:
    if isinstance(stmt, Loop):
        if stmt.var == var:  # inner binding shadows
            return stmt
        return Loop(stmt.var, stmt.lo, stmt.hi,
                    tuple(substitute_stmt(s, var, replacement) for s in stmt.body))
    indices = tuple(substitute(i, var, replacement) for i in stmt.indices)
    rhs = substitute(stmt.rhs, var, replacement)
    kind = Assign if isinstance(stmt, Assign) else Accumulate
    return kind(stmt.array, indices, rhs)


def free_vars(expr: Expr) -> set[str]:
    if isinstance(expr, Const):
        return set()
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Read):
        return set().union(*(free_vars(i) for i in expr.indices)) if expr.indices else set()
    return free_vars(expr.left) | free_vars(expr.right)


# -- parsing -------------------------------------------------------------------

_TOKEN = re.compile(r"\d+\.\d+|\d+|\w+|[\[\](),+\-*]")
_LOOP = re.compile(r"^for (\w+) in seq\(([^,]+), ([^)]+)\):$")


class _ExprParser:
    def __init__(self, text: str):
        self.tokens = _TOKEN.findall(text)
        if "".join(self.tokens).replace(" ", "") != text.replace(" ", ""):
            raise KernelSyntaxError(f"cannot tokenize expression '{text}'")
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected: str | None = None) -> str:
        tok = self.peek()
        if tok is None or (expected is not None and tok != expected):
            raise KernelSyntaxError(f"expected '{expected}', found '{tok}'")
        self.pos += 1
        return tok

    def parse(self) -> Expr:
        expr = self.sum()
        if self.peek() is not None:
            raise KernelSyntaxError(f"trailing tokens after expression: '{self.peek()}'")
        return expr

    def sum(self) -> Expr:
        expr = self.product()
        while self.peek() in ("+", "-"):
            op = self.take()
            right = self.product()
            expr = BinOp(op, expr, right)
        return expr

    def product(self) -> Expr:
        expr = self.atom()
        while self.peek() == "*":
            self.take()
            expr = BinOp("*", expr, self.atom())
        return expr

    def atom(self) -> Expr:
        tok = self.peek()
        if tok is None:
            raise KernelSyntaxError("unexpected end of expression")
        if tok == "(":
            self.take()
            expr = self.sum()
            self.take(")")
            return expr
        if tok == "-":
            self.take()
            inner = self.atom()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return BinOp("-", Const(0), inner)
        self.take()
        if re.fullmatch(r"\d+\.\d+", tok):
            return Const(float(tok))
        if tok.isdigit():
            return Const(int(tok))
        if not re.fullmatch(r"\w+", tok):
            raise KernelSyntaxError(f"unexpected token '{tok}'")
        if self.peek() == "[":
            self.take()
            indices = [self.sum()]
            while self.peek() == ",":
                self.take()
                indices.append(self.sum())
            self.take("]")
            return Read(tok, tuple(indices))
        return Var(tok)


def parse_expr(text: str) -> Expr:
    return _ExprParser(text.strip()).parse()


def _parse_int(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        raise NonConstantBound(f"expected an integer constant, found '{text}'") from None


def _split_params(text: str) -> list[str]:
    parts = []
    depth = 0
    current = ""
    for ch in text:
        if ch == "," and depth == 0:
            parts.append(current)
            current = ""
            continue
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        current += ch
    if current.strip():
        parts.append(current)
    return parts


_PARAM = re.compile(r"^(\w+)\s*:\s*f32\s*\[([^\]]*)\]\s*@\s*DRAM$")


def parse_kernel(text: str) -> LoopNest:
    lines = [line.rstrip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise KernelSyntaxError("empty kernel text")

    header = ""
    body_start = 0
    for i, line in enumerate(lines):
        header += line.strip() if not header else " " + line.strip()
        if header.endswith("):"):
            body_start = i + 1
            break
    else:
        raise KernelSyntaxError("missing 'def name(...):' header")

    m = re.match(r"^def (\w+)\((.*)\):$", header)
    if m is None:
        raise KernelSyntaxError(f"malformed header '{header}'")
    name = m.group(1)
    arrays = []
    for raw in _split_params(m.group(2)):
        pm = _PARAM.match(raw.strip())
        if pm is None:
            raise KernelSyntaxError(f"malformed parameter '{raw.strip()}'")
        extents = tuple(_parse_int(e) for e in pm.group(2).split(","))
        arrays.append(ArrayDecl(pm.group(1), extents))
    if not arrays:
        raise KernelSyntaxError("kernel declares no arrays")

    body_lines = lines[body_start:]
    if not body_lines:
        raise KernelSyntaxError("kernel has an empty body")

    def indent_of(line: str) -> int:
        width = len(line) - len(line.lstrip(" "))
        if width % 4 != 0:
            raise KernelSyntaxError(f"indentation must be a multiple of 4 spaces: '{line}'")
        return width // 4

    base = indent_of(body_lines[0])
    pos = 0

    def parse_block(level: int) -> tuple[Statement, ...]:
        nonlocal pos
        stmts: list[Statement] = []
        while pos < len(body_lines):
            line = body_lines[pos]
            depth = indent_of(line)
            if depth < level:
                break
            if depth > level:
                raise KernelSyntaxError(f"unexpected indentation: '{line.strip()}'")
            stripped = line.strip()
            pos += 1
            loop = _LOOP.match(stripped)
            if loop:
                lo = _parse_int(loop.group(2))
                hi = _parse_int(loop.group(3))
                inner = parse_block(level + 1)
                if not inner:
                    raise KernelSyntaxError(f"loop '{stripped}' has an empty body")
                stmts.append(Loop(loop.group(1), lo, hi, inner))
                continue
            op = " += " if " += " in stripped else " = "
            if op not in stripped:
                raise KernelSyntaxError(f"cannot parse statement '{stripped}'")
            lhs_text, rhs_text = stripped.split(op, 1)
            lhs = parse_expr(lhs_text)
            if not isinstance(lhs, Read):
                raise KernelSyntaxError(f"left side must be an array element: '{stripped}'")
            for index in lhs.indices:
                if any(isinstance(node, Read) for node in _walk(index)):
                    raise KernelSyntaxError(f"array reads are not allowed in indices: '{stripped}'")
            kind = Accumulate if op == " += " else Assign
            stmts.append(kind(lhs.array, lhs.indices, parse_expr(rhs_text)))
        return tuple(stmts)

    if base != 0 and all(indent_of(l) >= base for l in body_lines):
        body_lines = [l[base * 4 :] for l in body_lines]
    body = parse_block(0)
    if pos < len(body_lines):
        raise KernelSyntaxError(f"unexpected indentation: '{body_lines[pos].strip()}'")
    nest = LoopNest(name, tuple(arrays), body)
    check_bounds(nest)
    return nest


def _walk(expr: Expr):
    yield expr
    if isinstance(expr, Read):
        for index in expr.indices:
            yield from _walk(index)
    elif isinstance(expr, BinOp):
        yield from _walk(expr.left)
        yield from _walk(expr.right)


# -- bounds checking -----------------------------------------------------------


def _interval(expr: Expr, ranges: dict[str, tuple[int, int]]) -> tuple[float, float]:
    if isinstance(expr, Const):
        return (expr.value, expr.value)
    if isinstance(expr, Var):
        if expr.name not in ranges:
            raise BoundsError(f"unbound variable '{expr.name}' in index expression")
        return ranges[expr.name]
    if isinstance(expr, Read):
        raise BoundsError("array reads are not allowed in index expressions")
    ll, lh = _interval(expr.left, ranges)
    rl, rh = _interval(expr.right, ranges)
    if expr.op == "+":
        return (ll + rl, lh + rh)
    if expr.op == "-":
        return (ll - rh, lh - rl)
    corners = (ll * rl, ll * rh, lh * rl, lh * rh)
    return (min(corners), max(corners))


def check_bounds(nest: LoopNest) -> None:
    """Reject any access that interval analysis cannot prove in-bounds."""
    extents = {a.name: a.extents for a in nest.arrays}

    def check_access(array: str, indices: tuple[Expr, ...], ranges) -> None:
        if array not in extents:
            raise BoundsError(f"unknown array '{array}'")
        if len(indices) != len(extents[array]):
            raise BoundsError(f"{array} expects {len(extents[array])} indices, got {len(indices)}")
        for dim, index in enumerate(indices):
            low, high = _interval(index, ranges)
            if low < 0 or high >= extents[array][dim]:
                raise BoundsError(
                    f"{array} index {dim} spans [{low}, {high}] outside [0, {extents[array][dim] - 1}]"
                )

    def visit(stmts: tuple[Statement, ...], ranges: dict[str, tuple[int, int]]) -> None:
        for stmt in stmts:
            if isinstance(stmt, Loop):
                if stmt.hi <= stmt.lo:
                    raise BoundsError(f"loop '{stmt.var}' has empty range [{stmt.lo}, {stmt.hi})")
                visit(stmt.body, {**ranges, stmt.var: (stmt.lo, stmt.hi - 1)})
                continue
            check_access(stmt.array, stmt.indices, ranges)
            for node in _walk(stmt.rhs):
                if isinstance(node, Read):
                    check_access(node.array, node.indices, ranges)

    visit(nest.body, {})


# -- rendering -----------------------------------------------------------------


def render_expr(expr: Expr) -> str:
    if isinstance(expr, Const):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Read):
        return f"{expr.array}[{', '.join(render_expr(i) for i in expr.indices)}]"
    left = render_expr(expr.left)
    right = render_expr(expr.right)
    if expr.op == "*":
        if isinstance(expr.left, BinOp) and expr.left.op in "+-":
            left = f"({left})"
        if isinstance(expr.right, BinOp) and expr.right.op in "+-":
            right = f"({right})"
    return f"{left} {expr.op} {right}"


def render_line(stmt: Statement) -> str:
    """One statement as source text, without indentation or children."""
    if isinstance(stmt, Loop):
        return f"for {stmt.var} in seq({stmt.lo}, {stmt.hi}):"
    lhs = f"{stmt.array}[{', '.join(render_expr(i) for i in stmt.indices)}]"
    op = "+=" if isinstance(stmt, Accumulate) else "="
    return f"{lhs} {op} {render_expr(stmt.rhs)}"


def render_header(nest: LoopNest) -> list[str]:
    """Header lines, wrapped at 79 columns with parameters kept whole."""
    params = [f"{a.name}: f32[{', '.join(str(e) for e in a.extents)}] @ DRAM" for a in nest.arrays]
    opening = f"def {nest.name}("
    header = opening + ", ".join(params) + "):"
    if len(header) <= 79:
        return [header]
    lines: list[str] = []
    indent = " " * len(opening)
    current = opening
    first = True
    for i, param in enumerate(params):
        tail = "):" if i == len(params) - 1 else ","
        piece = param + tail
        candidate = current + ("" if first else " ") + piece
        if not first and len(candidate) > 79:
            lines.append(current)
            current = indent + piece
        else:
            current = candidate
        first = False
    lines.append(current)
    return lines


def render_kernel(nest: LoopNest) -> str:
    lines = render_header(nest)

    def emit(stmts: tuple[Statement, ...], depth: int) -> None:
        pad = "    " * depth
        for stmt in stmts:
            lines.append(pad + render_line(stmt))
            if isinstance(stmt, Loop):
                emit(stmt.body, depth + 1)

    emit(nest.body, 1)
    return "\n".join(lines) + "\n"


# -- interpretation ------------------------------------------------------------


def interpret(nest: LoopNest, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run the kernel sequentially in 32-bit float and return all arrays."""
    arrays: dict[str, np.ndarray] = {}
    declared = {a.name: a.extents for a in nest.arrays}
    if set(inputs) != set(declared):
        raise ShapeMismatch(f"inputs {sorted(inputs)} do not match arrays {sorted(declared)}")
    for name, extents in declared.items():
        value = np.asarray(inputs[name], dtype=np.float32)
        if value.shape != extents:
            raise ShapeMismatch(f"{name} has shape {value.shape}, expected {extents}")
        arrays[name] = value.copy()

    def evaluate(expr: Expr, env: dict[str, int]) -> np.float32:
        if isinstance(expr, Const):
            return np.float32(expr.value)
        if isinstance(expr, Var):
            return np.float32(env[expr.name])
        if isinstance(expr, Read):
            spot = tuple(int(evaluate(i, env)) for i in expr.indices)
            return arrays[expr.array][spot]
        left = evaluate(expr.left, env)
        right = evaluate(expr.right, env)
        if expr.op == "+":
            return np.float32(left + right)
        if expr.op == "-":
            return np.float32(left - right)
        return np.float32(left * right)

    def run(stmts: tuple[Statement, ...], env: dict[str, int]) -> None:
        for stmt in stmts:
            if isinstance(stmt, Loop):
                for i in range(stmt.lo, stmt.hi):
                    env[stmt.var] = i
                    run(stmt.body, env)
                del env[stmt.var]
                continue
            spot = tuple(int(evaluate(i, env)) for i in stmt.indices)
            value = evaluate(stmt.rhs, env)
            if isinstance(stmt, Assign):
                arrays[stmt.array][spot] = value
            else:
                arrays[stmt.array][spot] = np.float32(arrays[stmt.array][spot] + value)

    run(nest.body, {})
    return arrays


@dataclass(frozen=True)
class EquivalenceVerdict:
    passed: bool
    trials_run: int
    detail: str = ""

    def __bool__(self) -> bool:
        return self.passed


def check_equivalence(k1: LoopNest, k2: LoopNest, trials: int = 5, seed: int = 0) -> EquivalenceVerdict:
    """Compare both kernels bit-exactly on random small-integer inputs.

    Small integers keep every f32 operation exact, so legal reassociations
    (tiling, interchange, unrolling) cannot introduce rounding differences.
    """
    sig1 = tuple((a.name, a.extents) for a in k1.arrays)
    sig2 = tuple((a.name, a.extents) for a in k2.arrays)
    if sig1 != sig2:
        raise SignatureMismatch(f"signatures differ: {sig1} vs {sig2}")
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        inputs = {
            a.name: rng.integers(-4, 5, size=a.extents).astype(np.float32) for a in k1.arrays
        }
        out1 = interpret(k1, inputs)
        out2 = interpret(k2, inputs)
        for name in out1:
            if not np.array_equal(out1[name], out2[name]):
                return EquivalenceVerdict(False, trial + 1, f"trial {trial}: array '{name}' differs")
    return EquivalenceVerdict(True, trials)


# -- reduced clones and the cost proxy -----------------------------------------


def reduce_extents(nest: LoopNest, limit: int = 8) -> LoopNest:
    """Shrink every extent above `limit` to it, consistently by value.

    Loop bounds in the unscheduled kernels are exactly the extent
    constants, so a value map keeps arrays and loops in agreement.
    """
    mapping = {}
    for decl in nest.arrays:
        for extent in decl.extents:
            mapping[extent] = min(extent, limit)
    arrays = tuple(
        ArrayDecl(a.name, tuple(mapping[e] for e in a.extents)) for a in nest.arrays
    )

    def rewrite(stmt: Statement) -> Statement:
        if isinstance(stmt, Loop):
            hi = mapping.get(stmt.hi, stmt.hi)
            return Loop(stmt.var, stmt.lo, hi, tuple(rewrite(s) for s in stmt.body))
        return stmt

    reduced = LoopNest(nest.name, arrays, tuple(rewrite(s) for s in nest.body))
    check_bounds(reduced)
    return reduced


def _const_value(expr: Expr) -> int | float | None:
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, BinOp):
        left = _const_value(expr.left)
        right = _const_value(expr.right)
        if left is None or right is None:
            return None
        if expr.op == "+":
            return left + right
        if expr.op == "-":
            return left - right
        return left * right
    return None


def _coefficient(expr: Expr, var: str) -> int | float | None:
    """Affine coefficient of `var` in `expr`, or None when non-affine."""
    if isinstance(expr, Const):
        return 0
    if isinstance(expr, Var):
        return 1 if expr.name == var else 0
    if isinstance(expr, Read):
        return None
    left = _coefficient(expr.left, var)
    right = _coefficient(expr.right, var)
    if expr.op in ("+", "-"):
        if left is None or right is None:
            return None
        return left + right if expr.op == "+" else left - right
    lconst = _const_value(expr.left)
    rconst = _const_value(expr.right)
    if lconst is not None and right is not None:
        return lconst * right
    if rconst is not None and left is not None:
        return left * rconst
    return None


def locality_cost(nest: LoopNest, penalty: float = 4.0) -> float:
    """Dynamic statement count plus a penalty per strided access execution.

    Every loop header and leaf statement instance counts once.  Each array
    access is charged `penalty` per execution when the innermost enclosing
    loop variable appearing in its indices walks the flattened row-major
    layout with a stride other than one.
    """
    extents = {a.name: a.extents for a in nest.arrays}

    def row_weights(shape: tuple[int, ...]) -> list[int]:
        weights = [1] * len(shape)
        for d in range(len(shape) - 2, -1, -1):
            weights[d] = weights[d + 1] * shape[d + 1]
        return weights

    def access_is_strided(array: str, indices: tuple[Expr, ...], loop_vars: list[str]) -> bool:
        used = set().union(*(free_vars(i) for i in indices)) if indices else set()
        innermost = next((v for v in reversed(loop_vars) if v in used), None)
        if innermost is None:
            return False
        weights = row_weights(extents[array])
        stride = 0.0
        for dim, index in enumerate(indices):
            coefficient = _coefficient(index, innermost)
            if coefficient is None:
                return True  # non-affine: assume the worst
            stride += coefficient * weights[dim]
        return stride != 1

    total = 0.0

    def visit(stmts: tuple[Statement, ...], multiplier: float, loop_vars: list[str]) -> None:
        nonlocal total
        for stmt in stmts:
            total += multiplier
            if isinstance(stmt, Loop):
                visit(stmt.body, multiplier * (stmt.hi - stmt.lo), loop_vars + [stmt.var])
                continue
            accesses = [(stmt.array, stmt.indices)]
            accesses.extend(
                (node.array, node.indices) for node in _walk(stmt.rhs) if isinstance(node, Read)
            )
            for array, indices in accesses:
                if access_is_strided(array, indices, loop_vars):
                    total += penalty * multiplier

    visit(nest.body, 1.0, [])
    return total
