import io
import json
import warnings
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenfocus import synthetic as syn
from tokenfocus.dataset import (
    ElementAnnotation,
    ExternalDistributionRecord,
    FoldPlan,
    PromptType,
    SampleRecord,
    build_prompt,
    fold_summary,
    fold_view,
    load_external_distributions,
    parse_dataset,
    scan_dataset,
    serialize_dataset,
    serialize_external,
    split_folds,
)
from tokenfocus.errors import DatasetParseError, InputError
from tokenfocus.score_core import ScoreSpace, TaskKind

DATA = Path(__file__).parent / "data"


def base_record(**kw):
    rec = SampleRecord(
        sample_id="s1", prompt_id="p1", prompt_text="a red fox jumping", t2i_model="m1",
        prompt_type=PromptType.REAL, image_ref="img/1.png", total_score=3.5,
        elements=(ElementAnnotation("fox", "object", 1.0),
                  ElementAnnotation("jumping", "action", 2 / 3)),
    )
    return replace(rec, **kw)


def line(rec):
    return json.dumps(rec.to_dict())


# -- parsing ------------------------------------------------------------------


def test_empty_source_gives_no_records():
    assert parse_dataset(io.StringIO("")) == []


def test_fixture_round_trips_bit_identically():
    text = (DATA / "samples10.jsonl").read_text(encoding="utf-8")
    records = parse_dataset(io.StringIO(text))
    assert len(records) == 10
    assert serialize_dataset(records) == text
    assert parse_dataset(DATA / "samples10.jsonl") == records


def test_total_score_out_of_range_names_field():
    bad = base_record().to_dict()
    bad["total_score"] = 5.5
    with pytest.raises(DatasetParseError) as err:
        parse_dataset(io.StringIO(json.dumps(bad)))
    assert err.value.diagnostics == [(1, "total_score", "value 5.5 outside [1.0, 5.0]")]


def test_diagnostics_are_positioned_and_complete():
    good = line(base_record())
    dup = line(base_record())
    bad_elem = base_record().to_dict()
    bad_elem["elements"][1]["category"] = "colour"
    text = "\n".join([good, "{not json", dup, json.dumps(bad_elem).replace('"s1"', '"s9"')])
    records, diags = scan_dataset(io.StringIO(text))
    assert len(records) == 1
    assert [d[0] for d in diags] == [2, 3, 4]
    assert diags[1][1] == "sample_id" and "duplicate" in diags[1][2]
    assert diags[2][1] == "elements[1].category"


def test_header_must_match_format():
    text = '{"format": "external-distributions", "version": 1}\n' + line(base_record())
    with pytest.raises(DatasetParseError):
        parse_dataset(io.StringIO(text))


@pytest.mark.parametrize("field,value", [
    ("prompt_id", ""), ("prompt_type", "imagined"), ("prompt_quality", 1.5),
    ("elements", "fox"), ("total_score", "4"), ("extra", 1),
])
def test_field_level_rejections(field, value):
    d = base_record().to_dict()
    d[field] = value
    _, diags = scan_dataset(io.StringIO(json.dumps(d)))
    assert len(diags) == 1 and diags[0][1] == field


def test_record_constructor_enforces_invariants():
    with pytest.raises(InputError):
        base_record(total_score=0.5)
    with pytest.raises(InputError):
        ElementAnnotation("x", "object", 1.2)
    with pytest.raises(ValueError):
        ElementAnnotation("x", "colour", 1.0)


# -- prompts ------------------------------------------------------------------


def fixture_record():
    return parse_dataset(DATA / "samples10.jsonl")[1]


def test_prompt_golden_total():
    got = build_prompt(fixture_record(), TaskKind.TOTAL, syn.TOTAL_SPACE)
    assert got == (DATA / "prompt_total.golden.txt").read_text(encoding="utf-8")


def test_prompt_golden_element():
    got = build_prompt(fixture_record(), TaskKind.ELEMENT, syn.ELEMENT_SPACE, element_index=2)
    assert got == (DATA / "prompt_element.golden.txt").read_text(encoding="utf-8")


def test_prompt_differs_only_in_model_segment():
    a = build_prompt(base_record(t2i_model="sdxl"), "total", syn.TOTAL_SPACE).splitlines()
    b = build_prompt(base_record(t2i_model="flux"), "total", syn.TOTAL_SPACE).splitlines()
    diff = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
    assert len(a) == len(b) and diff == [2] and a[2].startswith("T2I model:")


def test_prompt_omits_optional_block_when_absent():
    text = build_prompt(base_record(), "total", syn.TOTAL_SPACE)
    assert "evaluation" not in text.lower()
    assert "None" not in text
    with_q = build_prompt(base_record(prompt_quality=0.4), "total", syn.TOTAL_SPACE)
    assert "Prompt evaluation: prompt_quality=0.4" in with_q


def test_prompt_lists_labels_from_space():
    alt = build_prompt(base_record(), "total", syn.ALT_TOTAL_SPACE)
    assert "Allowed answers: 1, 2\n" in alt


def test_prompt_invalid_element_index():
    with pytest.raises(InputError):
        build_prompt(base_record(), "element", syn.ELEMENT_SPACE, element_index=5)
    with pytest.raises(InputError):
        build_prompt(base_record(), "element", syn.ELEMENT_SPACE)


def test_prompt_is_deterministic():
    r = base_record()
    assert build_prompt(r, "total", syn.TOTAL_SPACE) == build_prompt(r, "total", syn.TOTAL_SPACE)


texts = st.text(min_size=1, max_size=20)


@given(texts, texts, texts, texts)
def test_prompt_injective_on_embedded_fields(p1, p2, m1, m2):
    a = base_record(prompt_text=p1, t2i_model=m1)
    b = base_record(prompt_text=p2, t2i_model=m2)
    pa = build_prompt(a, "total", syn.TOTAL_SPACE)
    pb = build_prompt(b, "total", syn.TOTAL_SPACE)
    assert (pa == pb) == ((p1, m1) == (p2, m2))


# -- folds --------------------------------------------------------------------


def hundred_prompts():
    return syn.make_records(100, 6, seed=3)


def test_hundred_prompts_five_folds_of_twenty():
    recs = hundred_prompts()
    plan = split_folds(recs, 5, seed=1234)
    for row in fold_summary(recs, plan):
        assert row["eval_prompts"] == 20 and row["train_prompts"] == 80
    evals = [set(plan.prompts_in(f)) for f in range(5)]
    assert set().union(*evals) == {r.prompt_id for r in recs}
    for i in range(5):
        for j in range(i + 1, 5):
            assert not evals[i] & evals[j]


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400), st.integers(2, 8), st.integers(0, 10 ** 6))
def test_fold_sizes_balanced(n_prompts, k, seed):
    recs = [base_record(sample_id=f"s{i}", prompt_id=f"q{i:04d}") for i in range(n_prompts)]
    plan = split_folds(recs, k, seed)
    sizes = [len(plan.prompts_in(f)) for f in range(k)]
    assert max(sizes) - min(sizes) <= 1
    for s in sizes:
        assert abs(s - n_prompts / k) < 1
        assert abs((n_prompts - s) - n_prompts * (k - 1) / k) < 1


def test_large_split_keeps_four_to_one_ratio():
    # 2,991 prompts in 5 folds: 598 or 599 eval prompts per fold
    recs = [base_record(sample_id=f"s{i}", prompt_id=f"q{i:05d}") for i in range(2991)]
    plan = split_folds(recs, 5, 1234)
    sizes = sorted(len(plan.prompts_in(f)) for f in range(5))
    assert sizes == [598, 598, 598, 598, 599]
    assert {2991 - s for s in sizes} == {2393, 2392}


def test_split_ignores_record_order():
    recs = hundred_prompts()
    a = split_folds(recs, 5, 9)
    b = split_folds(list(reversed(recs)), 5, 9)
    assert a.assignment == b.assignment
    assert split_folds(recs, 5, 10).assignment != a.assignment


def test_split_errors():
    recs = [base_record(sample_id=f"s{i}", prompt_id=f"q{i}") for i in range(3)]
    with pytest.raises(InputError):
        split_folds(recs, 1, 0)
    with pytest.raises(InputError):
        split_folds(recs, 4, 0)


def test_fold_view_partition_and_conservation():
    recs = hundred_prompts()
    plan = split_folds(recs, 5, 1)
    for f in range(5):
        train, evl = fold_view(recs, plan, f)
        assert len(train) + len(evl) == len(recs)
        assert not {r.prompt_id for r in train} & {r.prompt_id for r in evl}
        assert {r.sample_id for r in train} | {r.sample_id for r in evl} == {r.sample_id for r in recs}
    with pytest.raises(InputError):
        fold_view(recs, plan, 5)


def test_fold_view_allows_generator_overlap():
    recs = hundred_prompts()
    train, evl = fold_view(recs, split_folds(recs, 5, 1), 0)
    assert {r.t2i_model for r in train} & {r.t2i_model for r in evl}


def test_fold_view_warns_on_degenerate_split():
    recs = [base_record(sample_id="a"), base_record(sample_id="b")]
    plan = FoldPlan(2, {"p1": 0})
    with pytest.warns(UserWarning, match="empty"):
        train, evl = fold_view(recs, plan, 1)
    assert evl == [] and len(train) == 2
    with pytest.warns(UserWarning, match="empty"):
        fold_view(recs, plan, 0)


def test_plan_json_round_trip():
    plan = split_folds(hundred_prompts(), 5, 4)
    assert FoldPlan.from_json(plan.to_json()) == plan


# -- external distributions ------------------------------------------------------

SPACE01 = ScoreSpace.from_lists([7, 9], [0, 1], TaskKind.ELEMENT)
TOTAL5 = syn.TOTAL_SPACE


def ext_text(*objs):
    return "\n".join(json.dumps(o) for o in objs)


def test_external_literal_projection_matches_hand_values():
    src = ext_text({"sample_id": "a", "task": "element", "element_index": 0,
                    "score_token_probs": {"7": 0.25, "9": 0.375}})
    ext = load_external_distributions(io.StringIO(src), SPACE01)
    masses = ext["a"]["element:0"].project(SPACE01, "literal").masses
    assert masses == pytest.approx([0.4688, 0.5312], abs=5e-5)
    assert ext["a"]["element:0"].predict(SPACE01, "literal") == pytest.approx(0.5312093733737563)


def test_external_mode_mismatch():
    src = ext_text({"sample_id": "a", "task": "element", "element_index": 0,
                    "score_token_logits": {"7": 0.0, "9": 1.0}})
    rec = load_external_distributions(io.StringIO(src), SPACE01)["a"]["element:0"]
    with pytest.raises(InputError, match="score_token_probs"):
        rec.project(SPACE01, "literal")
    assert rec.predict(SPACE01, "logit_renorm") == pytest.approx(1 / (1 + 2.718281828459045 ** -1))


def test_external_empty_source():
    assert load_external_distributions(io.StringIO(""), SPACE01) == {}


def test_external_unknown_token_and_duplicates():
    unknown = ext_text({"sample_id": "a", "task": "element", "element_index": 0,
                        "score_token_probs": {"8": 0.5}})
    with pytest.raises(DatasetParseError, match="unknown token id 8"):
        load_external_distributions(io.StringIO(unknown), SPACE01)
    row = {"sample_id": "a", "task": "element", "element_index": 0,
           "score_token_probs": {"7": 0.5, "9": 0.5}}
    with pytest.raises(DatasetParseError, match="duplicate"):
        load_external_distributions(io.StringIO(ext_text(row, row)), SPACE01)


def test_external_round_trip_with_task_map():
    recs = [
        ExternalDistributionRecord("a", TaskKind.TOTAL, None, {21: 0.1, 22: 0.2, 23: 0.3, 24: 0.1, 25: 0.1}),
        ExternalDistributionRecord("a", TaskKind.ELEMENT, 0, None, {7: -1.0, 9: 2.0}),
    ]
    text = serialize_external(recs)
    loaded = load_external_distributions(io.StringIO(text), {"total": TOTAL5, "element": SPACE01})
    assert set(loaded["a"]) == {"total", "element:0"}
    assert loaded["a"]["total"] == recs[0]
    assert loaded["a"]["element:0"] == recs[1]


def test_external_record_needs_a_table():
    with pytest.raises(InputError):
        ExternalDistributionRecord("a", TaskKind.TOTAL)
