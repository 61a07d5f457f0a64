"""Hole extraction, fill enumeration, and the end-to-end repair flow."""

import pytest

from ta_lift.fixtures import golden_program, kernel
from ta_lift.gateway import GenerationParams, ReplayBackend
from ta_lift.kernels import generate_testcases
from ta_lift.prompts import (
    EmptyConstantSet,
    build_repair_fill_prompt,
    build_repair_mark_prompt,
)
from ta_lift.repair import (
    Aborted,
    Exhausted,
    HoleTemplate,
    NoHolesFound,
    Repaired,
    enumerate_fills,
    extract_holes,
    repair,
)

GOLDEN = golden_program("gv2")
SPEC = kernel("gv2")
CASES = generate_testcases(SPEC, seed=29, count=3)


def perturbed(old: str, new: str) -> str:
    assert GOLDEN.count(old) == 1
    return GOLDEN.replace(old, new)


# -- hole extraction -----------------------------------------------------------


def test_marker_holes_in_textual_order():
    template = extract_holes("mvin(A, <CONST>, 4, <CONST>);\nconfig_st(<CONST>);")
    assert [h.id for h in template.holes] == ["h0", "h1", "h2"]
    assert template.holes[0].line == 1
    assert template.holes[2].line == 2
    assert template.holes[0].column < template.holes[1].column


def test_unchanged_code_has_no_holes():
    with pytest.raises(NoHolesFound):
        extract_holes(GOLDEN, original=GOLDEN)


def test_introduced_declaration_is_a_named_hole():
    original = "config_st(4);\nfence();"
    marked = "static uint32_t K = 4;\nconfig_st(K);\nfence();"
    template = extract_holes(marked, original)
    (hole,) = template.holes
    assert hole.id == "K" and hole.name == "K"
    assert hole.line == 1


def test_declaration_already_in_original_is_not_a_hole():
    original = "static uint32_t K = 4;\nconfig_st(K);\nfence();"
    with pytest.raises(NoHolesFound):
        extract_holes(original, original)


def test_named_holes_need_the_original():
    marked = "static uint32_t K = 4;\nconfig_st(K);\nfence();"
    with pytest.raises(NoHolesFound):
        extract_holes(marked)


def test_markers_and_named_holes_interleave_by_position():
    original = "config_st(4);\nconfig_ld(48, 0);\nfence();"
    marked = "config_st(<CONST>);\nstatic uint32_t S = 48;\nconfig_ld(S, 0);\nfence();"
    template = extract_holes(marked, original)
    assert [h.id for h in template.holes] == ["h0", "S"]


def test_substitute_fills_every_hole():
    original = "config_st(4);\nconfig_ld(48, 0);\nfence();"
    marked = "config_st(<CONST>);\nstatic uint32_t S = 48;\nconfig_ld(S, 0);\nfence();"
    template = extract_holes(marked, original)
    filled = template.substitute({"h0": 4, "S": 12})
    assert filled == "config_st(4);\nstatic uint32_t S = 12;\nconfig_ld(S, 0);\nfence();"


# -- fill enumeration ----------------------------------------------------------


def test_single_hole_two_constants():
    template = extract_holes("config_st(<CONST>);\nfence();")
    fills = list(enumerate_fills(template, [0, 1]))
    assert [f.assignment for f in fills] == [(("h0", 0),), (("h0", 1),)]
    assert [f.code.splitlines()[0] for f in fills] == ["config_st(0);", "config_st(1);"]


def test_two_holes_default_set_is_25_candidates():
    template = extract_holes("config_st(<CONST>);\nconfig_ld(<CONST>, 0);\nfence();")
    fills = list(enumerate_fills(template, [0, 1, 3, 4, 12]))
    assert len(fills) == 25
    assert fills[0].assignment == (("h0", 0), ("h1", 0))
    assert fills[1].assignment == (("h0", 0), ("h1", 1))
    assert fills[5].assignment == (("h0", 1), ("h1", 0))
    assert fills[-1].assignment == (("h0", 12), ("h1", 12))


def test_cap_truncates_product():
    marked = "\n".join("config_st(<CONST>);" for _ in range(5)) + "\nfence();"
    template = extract_holes(marked)
    enumerator = enumerate_fills(template, [0, 1, 3, 4, 12], cap=100)
    fills = list(enumerator)
    assert len(fills) == 100
    assert enumerator.capped
    assert enumerator.total == 3125


def test_unparseable_fills_are_skipped_and_counted():
    template = extract_holes("mvout(C, 0x80000000, 1, <CONST>);\nfence();")
    enumerator = enumerate_fills(template, [-1, 4])
    fills = list(enumerator)
    assert [f.assignment for f in fills] == [(("h0", 4),)]
    assert enumerator.skipped == 1
    assert not enumerator.capped


def test_empty_constant_set_rejected():
    template = extract_holes("config_st(<CONST>);")
    with pytest.raises(EmptyConstantSet):
        enumerate_fills(template, [])


# -- repair flow ---------------------------------------------------------------


def test_already_passing_candidate_repairs_immediately():
    result = repair(GOLDEN, SPEC, CASES, mode="enumerate")
    assert result.outcome == Repaired(program=GOLDEN, assignment=())
    assert result.stats.candidates_tried == 0


def test_enumerate_repairs_premarked_candidate():
    candidate = perturbed("config_st(4);", "config_st(<CONST>);")
    result = repair(candidate, SPEC, CASES, mode="enumerate")
    assert isinstance(result.outcome, Repaired)
    assert result.outcome.program == GOLDEN
    assert result.outcome.assignment == (("h0", 4),)
    assert result.stats.candidates_tried == 4


def test_enumerate_with_manual_marking():
    candidate = perturbed("config_st(4);", "config_st(3);")
    marked = perturbed("config_st(4);", "config_st(<CONST>);")
    result = repair(candidate, SPEC, CASES, mode="enumerate", marked=marked)
    assert isinstance(result.outcome, Repaired)
    assert result.outcome.program == GOLDEN


def test_missing_value_exhausts_constant_set():
    candidate = perturbed("config_ld(48, 0);", "config_ld(<CONST>, 0);")
    result = repair(candidate, SPEC, CASES, mode="enumerate")
    assert result.outcome == Exhausted(tried=5)


def test_too_many_holes_aborts_enumeration():
    candidate = "\n".join("config_st(<CONST>);" for _ in range(6)) + "\nfence();"
    result = repair(candidate, SPEC, CASES, mode="enumerate")
    assert isinstance(result.outcome, Aborted)
    assert "enumeration limit" in result.outcome.reason


def test_marking_without_backend_aborts():
    candidate = perturbed("config_st(4);", "config_st(3);")
    result = repair(candidate, SPEC, CASES, mode="enumerate")
    assert isinstance(result.outcome, Aborted)
    assert "backend" in result.outcome.reason


def test_llm_mode_marks_and_fills():
    candidate = perturbed("config_st(4);", "config_st(3);")
    marked = perturbed("config_st(4);", "config_st(<CONST>);")
    params = GenerationParams(n_samples=1)
    backend = ReplayBackend(
        {
            build_repair_mark_prompt(candidate).fingerprint: [f"```\n{marked}\n```"],
            build_repair_fill_prompt(marked, (0, 1, 3, 4, 12)).fingerprint: [
                f"```\n{GOLDEN}\n```"
            ],
        }
    )
    result = repair(candidate, SPEC, CASES, mode="llm", backend=backend, params=params)
    assert isinstance(result.outcome, Repaired)
    assert result.outcome.program == GOLDEN.rstrip("\n")
    assert result.outcome.assignment == (("h0", 4),)
    assert result.stats.candidates_tried == 1


def test_llm_then_enumerate_falls_back():
    candidate = perturbed("config_st(4);", "config_st(3);")
    marked = perturbed("config_st(4);", "config_st(<CONST>);")
    params = GenerationParams(n_samples=1)
    bad_fill = perturbed("config_st(4);", "config_st(12);")
    backend = ReplayBackend(
        {
            build_repair_mark_prompt(candidate).fingerprint: [f"```\n{marked}\n```"],
            build_repair_fill_prompt(marked, (0, 1, 3, 4, 12)).fingerprint: [
                f"```\n{bad_fill}\n```"
            ],
        }
    )
    result = repair(
        candidate, SPEC, CASES, mode="llm_then_enumerate", backend=backend, params=params
    )
    assert isinstance(result.outcome, Repaired)
    assert result.outcome.program == GOLDEN.rstrip("\n")
    assert result.stats.candidates_tried == 5


def test_llm_mode_without_backend_aborts():
    candidate = perturbed("config_st(4);", "config_st(<CONST>);")
    result = repair(candidate, SPEC, CASES, mode="llm")
    assert isinstance(result.outcome, Aborted)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        repair(GOLDEN, SPEC, CASES, mode="anneal")
