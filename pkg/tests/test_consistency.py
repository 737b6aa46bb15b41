from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from framelens.consistency import (
    EvalRecord,
    InconsistencyReport,
    answer_item,
    evaluate_triplets,
    exclude_yesno_items,
    extract_letter,
    match_answer,
    normalize_answer,
    plot_report,
    rank_options,
    run_inconsistency,
    save_report,
    summarize,
    triplet_inconsistency,
)
from framelens.errors import EmptyDenominatorError
from framelens.harness import ScriptedAdapter
from framelens.reframe import CannedClient, FramingTriplet, QAItem, ReframeConfig

OPTS = ["red", "blue", "green", "white"]


def triplet(k, category=None):
    common = dict(image_ref=f"im{k}", category=category)
    return FramingTriplet(
        QAItem(f"t{k}:open", framing="open", question=f"What color is thing {k}?", answer="red", **common),
        QAItem(f"t{k}:yesno", framing="yesno", question=f"Is thing {k} red?", answer="yes", **common),
        QAItem(f"t{k}:mcq", framing="mcq", question=f"What color is thing {k}?", answer="red", options=OPTS, **common),
        source_id=f"t{k}",
    )


# -- matching ---------------------------------------------------------------------------

def test_open_match_fixture(fixtures_dir):
    cases = json.loads((fixtures_dir / "open_match_cases.json").read_text())
    assert len(cases) == 50
    for pred, gold, matched, rule in cases:
        assert tuple(match_answer(pred, gold, "open")) == (matched, rule), (pred, gold)


@pytest.mark.parametrize("pred,gold,ok", [
    ("Yes", "yes", True), ("yes.", "yes", True), ("No, it is not.", "no", True), ("NO", "yes", False),
    ("I think yes", "yes", True), ("no yes", "yes", False), ("maybe", "yes", False), ("", "no", False),
    ("Yes!", "Yes", True), ("nope", "no", False),
])
def test_yesno_match(pred, gold, ok):
    assert match_answer(pred, gold, "yesno").matched is ok


@pytest.mark.parametrize("pred,ok,rule", [
    ("B", True, "mcq-letter"), ("(B)", True, "mcq-letter"), ("B.", True, "mcq-letter"), ("B) blue", True, "mcq-letter"),
    (" B: blue", True, "mcq-letter"), ("A", False, "mcq-letter"), ("blue", True, "mcq-option-text"),
    ("Blue.", True, "mcq-option-text"), ("red", False, "mcq-option-text"), ("Because", False, "none"),
    ("b", False, "none"), ("navy", False, "none"),
])
def test_mcq_match(pred, ok, rule):
    assert tuple(match_answer(pred, "B", "mcq", options=OPTS)) == (ok, rule)


def test_mcq_gold_as_text():
    assert match_answer("B", "blue", "mcq", options=OPTS).matched
    assert not match_answer("C", "blue", "mcq", options=OPTS).matched


def test_normalize_and_letter():
    assert normalize_answer("The  Red, car!") == "red car"
    assert normalize_answer("a the an") == ""
    assert extract_letter("D") == "D" and extract_letter("Dog") is None and extract_letter("(C) green") == "C"
    with pytest.raises(ValueError):
        match_answer("x", "x", "essay")


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=30), st.text(max_size=30))
def test_open_match_is_case_insensitive(pred, gold):
    assert match_answer(pred, gold, "open") == match_answer(pred.upper(), gold.lower(), "open") or \
        pred.upper().lower() != pred.lower()


# -- option ranking ----------------------------------------------------------------------------

def test_rank_options_argmax():
    item = QAItem("m", "i", "mcq", "q?", "A", options=OPTS)
    assert rank_options(ScriptedAdapter(scores={"m": [-1.0, -0.5, -2.0, -3.0]}), item) == 1
    assert rank_options(ScriptedAdapter(scores={"m": [-1.0, -1.0, -2.0, -3.0]}), item) == 0
    assert answer_item(ScriptedAdapter(scores={"m": [-4.0, -3.0, -2.0, -1.0]}), item, "rank") == "D"


def test_rank_mode_yesno():
    item = QAItem("y", "i", "yesno", "q?", "no")
    assert answer_item(ScriptedAdapter(scores={"y": {"yes": -2.0, "no": -0.1}}), item, "rank") == "no"
    with pytest.raises(ValueError):
        answer_item(ScriptedAdapter(), item, "vote")


def _oracle_option_score(toy, item, option):
    """Mean log-probability of each option token, one incremental forward per token."""
    enc = toy.tokenize_with_layout(item)
    opt = list(toy.token_ids(option))
    ids = list(enc.ids)
    total = 0.0
    from framelens.harness.adapter import Encoded

    for tok in opt:
        e = Encoded(ids=np.asarray(ids), layout=enc.layout, image=enc.image)
        with torch.no_grad():
            logits, _ = toy.model(toy.embed(e), enc.layout.image_span)
        row = logits[-1].tolist()
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += row[tok] - lse
        ids.append(tok)
    return total / len(opt)


def test_toy_scores_match_oracle(toy, toy_trips):
    item = toy_trips[0].mcq
    for opt in item.options + ["white table"]:
        enc = toy.tokenize_with_layout(item)
        assert toy.score_option(enc, opt) == pytest.approx(_oracle_option_score(toy, item, opt), abs=1e-9)


# -- rates -----------------------------------------------------------------------------------------

def scripted_outcomes(n, yn_fail, mcq_fail, both=0):
    """n triplets whose open answers are right; given counts of reframed failures."""
    trips = [triplet(k) for k in range(n)]
    answers = {}
    for k, t in enumerate(trips):
        answers[t.open.id] = "red"
        answers[t.yesno.id] = "no" if k < yn_fail else "yes"
        answers[t.mcq.id] = "B" if (yn_fail - both) <= k < (yn_fail - both + mcq_fail) else "A"
    return trips, ScriptedAdapter(answers)


def test_rates_from_scripted_answers():
    trips, adapter = scripted_outcomes(10, yn_fail=2, mcq_fail=2, both=1)
    rep = triplet_inconsistency(trips, adapter)
    assert (rep.denominator, rep.yn_fail, rep.mcq_fail, rep.either_fail) == (10, 2, 2, 3)
    assert rep.rate == pytest.approx(0.3) and rep.yn_rate == 0.2 and rep.mcq_rate == 0.2


def test_open_failures_are_filtered_out():
    trips, adapter = scripted_outcomes(10, yn_fail=3, mcq_fail=0)
    adapter.answers[trips[9].open.id] = "blue"
    rep = triplet_inconsistency(trips, adapter)
    assert rep.n_items == 10 and rep.n_open_correct == 9 and rep.denominator == 9
    assert rep.rate == pytest.approx(3 / 9)


def test_empty_denominator():
    trips = [triplet(k) for k in range(3)]
    with pytest.raises(EmptyDenominatorError):
        triplet_inconsistency(trips, ScriptedAdapter(default="purple"))
    with pytest.raises(EmptyDenominatorError):
        summarize([])


def test_ordering_invariance():
    trips, adapter = scripted_outcomes(10, yn_fail=4, mcq_fail=3, both=2)
    base = triplet_inconsistency(trips, adapter)
    rng = np.random.default_rng(3)
    for _ in range(5):
        shuffled = [trips[i] for i in rng.permutation(len(trips))]
        assert triplet_inconsistency(shuffled, adapter).rate == base.rate


def test_adding_inconsistent_item_never_lowers_rate():
    trips, adapter = scripted_outcomes(8, yn_fail=2, mcq_fail=1)
    before = triplet_inconsistency(trips, adapter).rate
    extra = triplet(99)
    adapter.answers.update({extra.open.id: "red", extra.yesno.id: "no", extra.mcq.id: "A"})
    assert triplet_inconsistency(trips + [extra], adapter).rate >= before


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
def test_rate_bounds(flags):
    outcomes = []
    for k, (yn_ok, mc_ok) in enumerate(flags):
        t = triplet(k)
        outcomes.append((t, EvalRecord(t.yesno.id, "yesno", "", "yes", yn_ok, "r"),
                         EvalRecord(t.mcq.id, "mcq", "", "A", mc_ok, "r")))
    rep = summarize(outcomes)
    assert max(rep.yn_rate, rep.mcq_rate) <= rep.rate <= min(1.0, rep.yn_rate + rep.mcq_rate) + 1e-12
    assert rep.either_fail == sum(not (a and b) for a, b in flags)


def test_per_category_counts():
    trips = [triplet(k, category="color" if k < 4 else "count") for k in range(6)]
    answers = {t.open.id: "red" for t in trips}
    answers.update({t.yesno.id: "yes" for t in trips})
    answers.update({t.mcq.id: "A" for t in trips})
    answers[trips[0].yesno.id] = "no"
    answers[trips[5].mcq.id] = "C"
    rep = triplet_inconsistency(trips, ScriptedAdapter(answers))
    assert rep.per_category == {
        "color": {"denominator": 4, "either_fail": 1, "rate": 0.25},
        "count": {"denominator": 2, "either_fail": 1, "rate": 0.5},
    }


def test_exclude_yesno():
    items = [triplet(0).open, triplet(0).yesno, triplet(1).mcq]
    kept, n = exclude_yesno_items(items)
    assert n == 1 and [i.framing for i in kept] == ["open", "mcq"]


# -- end to end -------------------------------------------------------------------------------------

def _response(k, yn_answer="yes"):
    return json.dumps({
        "yes_no": {"question": f"Is thing {k} red?", "answer": yn_answer},
        "mcq": {"question": f"What color is thing {k}?", "options": OPTS, "answer_text": "red"},
    })


def test_run_inconsistency_end_to_end(tmp_path):
    items = [QAItem(f"i{k}", f"im{k}", "open", f"What color is thing {k}?", "red") for k in range(5)]
    items.append(QAItem("y", "imy", "yesno", "Is thing y red?", "yes"))
    canned = {f"What color is thing {k}?": _response(k) for k in range(4)}
    canned["What color is thing 4?"] = "not json"
    client = CannedClient(canned)
    answers = {f"i{k}": "red" for k in range(5)}
    answers["i3"] = "blue"  # wrong in the open framing
    answers.update({f"i{k}:yesno": "yes" for k in range(5)})
    answers.update({f"i{k}:mcq": "A" for k in range(5)})
    answers["i1:mcq"] = "D"
    adapter = ScriptedAdapter(answers)
    rep = run_inconsistency(items, adapter, client, config=ReframeConfig(max_concurrency=1),
                            journal_path=tmp_path / "j.jsonl")
    assert (rep.n_items, rep.n_excluded, rep.n_open_correct, rep.n_dropped) == (6, 1, 4, 1)
    assert rep.denominator == 3 and rep.either_fail == 1
    assert len(client.sent) == 4
    assert "i3" not in " ".join(adapter.calls[5:])
    save_report(rep, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["rate"] == pytest.approx(1 / 3) and len(data["records"]) == 6
    assert "denominator: 3" in rep.format_text()
    assert plot_report(rep, tmp_path / "r.png").stat().st_size > 0


def test_mcq_origin_asked_open_first():
    m = QAItem("m", "im", "mcq", "What color is thing 7? (A) red (B) blue (C) green (D) white", "A", options=OPTS)
    client = CannedClient({"What color is thing 7?": _response(7)})
    adapter = ScriptedAdapter({"m": "red", "m:mcq": "A", "m:yesno": "yes"})
    rep = run_inconsistency([m], adapter, client)
    assert rep.denominator == 1 and rep.rate == 0.0


def test_report_dict_keys():
    rep = InconsistencyReport(4, 1, 2, 2)
    assert rep.to_dict()["rate"] == 0.5 and "records" not in rep.to_dict()
