"""Constant repair: mark suspect constants as holes, fill, verify.

A near-miss candidate often differs from a working program only in a few
magic numbers (strides, tile counts, address offsets).  The flow here has
two steps.  First the candidate's uncertain constants are marked, either
by a model or by hand: each suspect site becomes a `<CONST>` token, or a
fresh `uint32_t` declaration whose initializer is the suspect value.
Second the holes are filled, either by asking the model or by enumerating
assignments from a small constant set, and every filled program runs
through the simulator until one verifies.
"""

from __future__ import annotations

import itertools
import re
import time
from dataclasses import dataclass, field
from typing import Iterator

from .gateway import Backend, GenerationParams
from .harness import extract_code
from .isa import Activation, Dataflow
from .kernels import KernelSpec, TestCase, verify_source
from .machine import MachineConfig
from .program_text import ProgramSyntaxError, parse_program
from .prompts import EmptyConstantSet, build_repair_fill_prompt, build_repair_mark_prompt

MARKER = "<CONST>"
DEFAULT_CONSTANT_SET: tuple[int, ...] = (0, 1, 3, 4, 12)
DEFAULT_CAP = 10_000
DEFAULT_MAX_HOLES = 5

_INSTRUCTION_WORDS = {
    "config_ex",
    "config_ld",
    "config_st",
    "mvin",
    "mvin2",
    "mvin3",
    "preload",
    "preload_zeros",
    "compute_preloaded",
    "compute_accumulated",
    "mvout",
    "fence",
}
_RESERVED = (
    _INSTRUCTION_WORDS
    | {d.value for d in Dataflow}
    | {a.value for a in Activation}
    | {"static", "uint32_t", "int", "for", "if", "else", "void", "sizeof", "float", "true", "false"}
)

_DECL = re.compile(r"^[ \t]*(?:static[ \t]+)?uint32_t[ \t]+(\w+)[ \t]*=[ \t]*(-?\d+)[ \t]*;", re.M)


class NoHolesFound(ValueError):
    """The marked code contains no repairable sites."""


@dataclass(frozen=True)
class Hole:
    id: str
    line: int
    column: int
    name: str | None = None


@dataclass(frozen=True)
class HoleTemplate:
    code: str
    holes: tuple[Hole, ...]
    origin: str = ""

    def substitute(self, values: dict[str, int]) -> str:
        """Fill every hole; `values` maps hole id to an integer."""
        code = self.code
        for hole in self.holes:
            if hole.name is None:
                continue
            pattern = rf"(\b(?:static[ \t]+)?uint32_t[ \t]+{re.escape(hole.name)}[ \t]*=[ \t]*)-?\d+"
            code = re.sub(pattern, rf"\g<1>{values[hole.id]}", code, count=1)
        marker_ids = [hole.id for hole in self.holes if hole.name is None]
        parts = code.split(MARKER)
        filled = parts[0]
        for hole_id, part in zip(marker_ids, parts[1:]):
            filled += str(values[hole_id]) + part
        return filled


def _position(text: str, offset: int) -> tuple[int, int]:
    line = text.count("\n", 0, offset) + 1
    column = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return line, column


def extract_holes(marked_code: str, original: str | None = None, origin: str = "") -> HoleTemplate:
    """Locate every hole in marked code, in textual order.

    `<CONST>` tokens always count.  When the original candidate is given,
    any fresh integer-initialized `uint32_t` declaration (a name the
    original never mentions) counts as a named hole as well.
    """
    found: list[tuple[int, Hole]] = []
    marker_index = 0
    for match in re.finditer(re.escape(MARKER), marked_code):
        line, column = _position(marked_code, match.start())
        found.append((match.start(), Hole(id=f"h{marker_index}", line=line, column=column)))
        marker_index += 1
    if original is not None:
        for match in _DECL.finditer(marked_code):
            name = match.group(1)
            if name in _RESERVED:
                continue
            if re.search(rf"\b{re.escape(name)}\b", original):
                continue
            line, column = _position(marked_code, match.start(2))
            found.append((match.start(2), Hole(id=name, line=line, column=column, name=name)))
    found.sort(key=lambda pair: pair[0])
    if not found:
        raise NoHolesFound("no <CONST> markers and no introduced constant declarations")
    return HoleTemplate(code=marked_code, holes=tuple(hole for _, hole in found), origin=origin)


@dataclass(frozen=True)
class FillCandidate:
    code: str
    assignment: tuple[tuple[str, int], ...]
    index: int


class FillEnumerator:
    """Iterates the Cartesian product of constants over holes, up to a cap.

    After iteration, `capped` says whether the product was truncated,
    `attempted` counts enumerated fills and `skipped` counts fills whose
    substitution did not parse.
    """

    def __init__(self, template: HoleTemplate, constants: list[int] | tuple[int, ...], cap: int = DEFAULT_CAP):
        distinct = tuple(dict.fromkeys(constants))
        if not distinct:
            raise EmptyConstantSet("cannot enumerate fills from an empty constant set")
        self.template = template
        self.constants = distinct
        self.cap = cap
        self.capped = False
        self.attempted = 0
        self.skipped = 0
        self.total = len(distinct) ** len(template.holes)

    def __iter__(self) -> Iterator[FillCandidate]:
        ids = [hole.id for hole in self.template.holes]
        for index, combo in enumerate(itertools.product(self.constants, repeat=len(ids))):
            if index >= self.cap:
                self.capped = True
                return
            self.attempted += 1
            values = dict(zip(ids, combo))
            code = self.template.substitute(values)
            try:
                parse_program(code, None)
            except ProgramSyntaxError:
                self.skipped += 1
                continue
            yield FillCandidate(code=code, assignment=tuple(zip(ids, combo)), index=index)


def enumerate_fills(
    template: HoleTemplate, constants: list[int] | tuple[int, ...], cap: int = DEFAULT_CAP
) -> FillEnumerator:
    return FillEnumerator(template, constants, cap)


@dataclass(frozen=True)
class Repaired:
    program: str
    assignment: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class Exhausted:
    tried: int


@dataclass(frozen=True)
class Aborted:
    reason: str


@dataclass
class RepairStats:
    candidates_tried: int = 0
    verify_seconds: float = 0.0


@dataclass
class RepairResult:
    outcome: Repaired | Exhausted | Aborted
    stats: RepairStats = field(default_factory=RepairStats)


def _match_assignment(template: HoleTemplate, filled: str) -> tuple[tuple[str, int], ...]:
    """Best-effort recovery of hole values from an externally filled program.

    Rewrites every named-hole initializer to a marker, then matches the
    filled text against the resulting pattern.  Holes are stored in offset
    order, so the i-th matched integer belongs to the i-th hole.  An empty
    tuple means the filled text strayed from the template's shape.
    """
    probe = template.code
    for hole in template.holes:
        if hole.name is None:
            continue
        pattern = rf"(\b(?:static[ \t]+)?uint32_t[ \t]+{re.escape(hole.name)}[ \t]*=[ \t]*)-?\d+"
        probe = re.sub(pattern, r"\g<1>" + MARKER, probe, count=1)
    parts = probe.strip().split(MARKER)
    if len(parts) != len(template.holes) + 1:
        return ()
    pattern_text = re.escape(parts[0]) + "".join(r"(-?\d+)" + re.escape(part) for part in parts[1:])
    match = re.fullmatch(pattern_text, filled.strip())
    if match is None:
        return ()
    return tuple(
        (hole.id, int(value)) for hole, value in zip(template.holes, match.groups())
    )


def repair(
    candidate: str,
    spec: KernelSpec,
    cases: list[TestCase],
    constants: tuple[int, ...] = DEFAULT_CONSTANT_SET,
    mode: str = "llm_then_enumerate",
    backend: Backend | None = None,
    params: GenerationParams | None = None,
    cap: int = DEFAULT_CAP,
    max_holes: int = DEFAULT_MAX_HOLES,
    marked: str | None = None,
    cfg: MachineConfig | None = None,
) -> RepairResult:
    """Drive the mark-then-fill flow until a candidate verifies.

    `marked` supplies hand-marked code so enumeration runs without any
    backend; a candidate that already contains `<CONST>` is treated the
    same way.  The first verified fill wins.
    """
    if mode not in ("llm", "enumerate", "llm_then_enumerate"):
        raise ValueError(f"unknown repair mode '{mode}'")
    stats = RepairStats()

    def verify(code: str) -> bool:
        start = time.perf_counter()
        verdict = verify_source(code, spec, cases, cfg)
        stats.verify_seconds += time.perf_counter() - start
        return verdict.passed

    if MARKER not in candidate and verify(candidate):
        return RepairResult(Repaired(program=candidate, assignment=()), stats)

    original: str | None = candidate
    if MARKER in candidate:
        marked_text = candidate
        original = None
    elif marked is not None:
        marked_text = marked
    else:
        if backend is None:
            return RepairResult(
                Aborted("marking holes needs a backend, a pre-marked candidate, or `marked`"), stats
            )
        mark_prompt = build_repair_mark_prompt(candidate)
        reply = backend.complete(mark_prompt, params or GenerationParams(n_samples=1))[0].text
        marked_text = _marked_from_reply(reply)

    try:
        template = extract_holes(marked_text, original, origin=spec.name)
    except NoHolesFound:
        return RepairResult(Aborted("the marked candidate contains no holes"), stats)

    if mode in ("llm", "llm_then_enumerate") and backend is not None:
        fill_prompt = build_repair_fill_prompt(template.code, constants)
        for completion in backend.complete(fill_prompt, params or GenerationParams(n_samples=1)):
            code = extract_code(completion.text)
            if code is None:
                continue
            stats.candidates_tried += 1
            if verify(code):
                return RepairResult(
                    Repaired(program=code, assignment=_match_assignment(template, code)), stats
                )
        if mode == "llm":
            return RepairResult(Exhausted(tried=stats.candidates_tried), stats)
    elif mode == "llm":
        return RepairResult(Aborted("llm fill mode needs a backend"), stats)

    if len(template.holes) > max_holes:
        return RepairResult(
            Aborted(f"{len(template.holes)} holes exceed the enumeration limit of {max_holes}"), stats
        )
    enumerator = enumerate_fills(template, constants, cap)
    for fill in enumerator:
        stats.candidates_tried += 1
        if verify(fill.code):
            return RepairResult(Repaired(program=fill.code, assignment=fill.assignment), stats)
    stats.candidates_tried += enumerator.skipped
    return RepairResult(Exhausted(tried=stats.candidates_tried), stats)


def _marked_from_reply(reply: str) -> str:
    """The marking reply is code, fenced or bare; fences win when present."""
    fenced = re.findall(r"```[^\n]*\n(.*?)```", reply, re.DOTALL)
    if fenced:
        return max(fenced, key=len).rstrip("\n")
    return reply
