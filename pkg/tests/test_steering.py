from __future__ import annotations

import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from framelens.errors import CapabilityError, InsufficientSampleError, ZeroVisualMassError
from framelens.harness.scripted import ScriptedAdapter
from framelens.harness.synthetic import synthetic_layout
from framelens.layout import BoxRegion
from framelens.metrics import VisualStats
from framelens.steering import (
    SteeringSpec,
    SteeringWarning,
    apply_box_row,
    apply_ve_row,
    box_rows,
    compute_multiplier,
    make_row_transform,
    measure,
    multiplier_sweep,
    per_sample_multiplier,
    ratio_recovery,
    spearman,
    steered_generate,
    ve_rows,
)
from oracles import spearman as spearman_oracle

LAY = synthetic_layout(grid=(2, 2), n_question=3, n_instruction=1, n_output=1)  # N = 10


def row_with(image, other):
    row = np.zeros(LAY.end())
    row[LAY.image_span.slice] = image
    rest = [i for i in range(LAY.end()) if i not in LAY.image_span]
    row[rest[: len(other)]] = other
    return row


# -- multiplier -------------------------------------------------------------------

def test_compute_multiplier():
    s = VisualStats(0.3, 0.19)
    assert compute_multiplier(s, s, "ve") == 1.0
    assert compute_multiplier(VisualStats(0.30), VisualStats(0.15), "ve") == pytest.approx(2.0)
    ratio = compute_multiplier(VisualStats(0.3, 0.19), VisualStats(0.3, 0.12), "box")
    assert ratio == pytest.approx(1.5833, abs=1e-4)
    with pytest.raises(ZeroVisualMassError):
        compute_multiplier(s, VisualStats(0.0), "ve")


# -- VE row edit -----------------------------------------------------------------------

def test_ve_identity():
    row = row_with([0.1, 0.1, 0.0, 0.0], [0.4, 0.4])
    assert apply_ve_row(row, LAY, 1.0) is row or np.array_equal(apply_ve_row(row, LAY, 1.0), row)


def test_ve_doubling():
    row = row_with([0.05] * 4, [0.4, 0.4])
    out = apply_ve_row(row, LAY, 2.0)
    assert out[LAY.image_span.slice].sum() == pytest.approx(0.4, abs=1e-15)
    rest = np.ones(LAY.end(), bool)
    rest[LAY.image_span.slice] = False
    np.testing.assert_allclose(out[rest], row[rest] * 0.75, atol=1e-15)


def test_ve_clamp_closed_form():
    row = row_with([0.125] * 4, [0.25, 0.25])  # s = 0.5
    out = apply_ve_row(row, LAY, 1e6, clamp_eps=1e-4)
    # m' = (1 - eps) / s, so the image mass is 1 - eps
    assert out[LAY.image_span.slice].sum() == pytest.approx(1 - 1e-4, abs=1e-15)
    assert out.sum() == pytest.approx(1.0, abs=1e-15)


def test_ve_all_image_row_warns():
    row = row_with([0.25] * 4, [])
    with pytest.warns(SteeringWarning):
        out = apply_ve_row(row, LAY, 2.0)
    np.testing.assert_array_equal(out, row)


def test_ve_below_one_shrinks():
    row = row_with([0.1] * 4, [0.6])
    out = apply_ve_row(row, LAY, 0.5)
    assert out[LAY.image_span.slice].sum() == pytest.approx(0.2)
    assert out.sum() == pytest.approx(1.0)


# -- box row edit ---------------------------------------------------------------------------

BOX = BoxRegion((0, 0, 14, 14), frozenset({0}))


def test_box_identity():
    row = row_with([0.1, 0.2, 0.1, 0.1], [0.5])
    np.testing.assert_array_equal(apply_box_row(row, LAY, BOX, 1.0), row)


def test_box_example():
    row = row_with([0.1, 0.2, 0.1, 0.1], [0.5])  # b = 0.1, o = 0.4
    out = apply_box_row(row, LAY, BOX, 3.0)
    img = out[LAY.image_span.slice]
    assert img[0] == pytest.approx(0.3, abs=1e-15)
    assert img[1:].sum() == pytest.approx(0.2, abs=1e-15)
    assert img.sum() == pytest.approx(0.5, abs=1e-15)


def test_box_nothing_outside_warns():
    row = row_with([0.5, 0, 0, 0], [0.5])
    with pytest.warns(SteeringWarning):
        out = apply_box_row(row, LAY, BOX, 2.0)
    np.testing.assert_array_equal(out, row)


def test_box_clamp():
    row = row_with([0.1, 0.2, 0.1, 0.1], [0.5])
    out = apply_box_row(row, LAY, BOX, 1e9, clamp_eps=1e-4)
    img = out[LAY.image_span.slice]
    assert img[0] == pytest.approx(0.5 - 1e-4, abs=1e-15)
    assert np.all(img >= 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        SteeringSpec("ve", 0.0)
    with pytest.raises(ValueError):
        SteeringSpec("box", 2.0)
    with pytest.raises(ValueError):
        SteeringSpec("pixels", 2.0)


# -- fuzzed invariants ---------------------------------------------------------------------------

def _fuzz_row(rng, n=LAY.end()):
    row = rng.dirichlet(np.full(n, rng.choice([0.1, 1.0, 3.0])))
    return row


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.floats(0.05, 50))
def test_ve_properties(seed, m):
    rng = np.random.default_rng(seed)
    row = _fuzz_row(rng)
    out = apply_ve_row(row, LAY, m)
    assert out.sum() == pytest.approx(1.0, abs=1e-8)
    assert np.all(out >= 0)
    img = row[LAY.image_span.slice]
    new = out[LAY.image_span.slice]
    j, k = np.argsort(img)[-2:]
    if img[j] > 0 and img[k] > 0:
        assert new[j] / new[k] == pytest.approx(img[j] / img[k], abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.floats(0.05, 50), patches=st.sets(st.integers(0, 3), min_size=1, max_size=3))
def test_box_properties(seed, m, patches):
    rng = np.random.default_rng(seed)
    row = _fuzz_row(rng)
    box = BoxRegion((0, 0, 1, 1), frozenset(patches))
    out = apply_box_row(row, LAY, box, m)
    assert out[LAY.image_span.slice].sum() == pytest.approx(row[LAY.image_span.slice].sum(), abs=1e-10)
    rest = np.ones(LAY.end(), bool)
    rest[LAY.image_span.slice] = False
    np.testing.assert_array_equal(out[rest], row[rest])
    assert np.all(out >= 0)


def test_torch_edits_match_row_edits(rng):
    n = LAY.end()
    rows = np.stack([_fuzz_row(rng) for _ in range(50)])
    img = torch.zeros(n, dtype=torch.bool)
    img[LAY.image_span.slice] = True
    inbox = torch.zeros(n, dtype=torch.bool)
    inbox[LAY.image_span.start + 0] = True
    for m in (0.5, 1.5, 4.0, 1e4):
        ve = ve_rows(torch.as_tensor(rows), img, m, 1e-4).numpy()
        bx = box_rows(torch.as_tensor(rows), inbox, img, m, 1e-4).numpy()
        for i, r in enumerate(rows):
            np.testing.assert_allclose(ve[i], apply_ve_row(r, LAY, m), atol=1e-14)
            np.testing.assert_allclose(bx[i], apply_box_row(r, LAY, BOX, m), atol=1e-14)


def test_row_transform_scope_and_identity(rng):
    n = LAY.end()
    attn = torch.as_tensor(np.stack([_fuzz_row(rng) for _ in range(n)]))[None]
    same = make_row_transform(SteeringSpec("ve", 1.0), LAY)(attn, 0)
    assert same is attn
    edited = make_row_transform(SteeringSpec("ve", 2.0), LAY)(attn, 0)
    first = LAY.image_span.stop
    assert torch.equal(edited[..., :first, :], attn[..., :first, :])
    assert not torch.equal(edited[..., first:, :], attn[..., first:, :])


# -- spearman ---------------------------------------------------------------------------------

def test_spearman_cases():
    assert spearman([1, 2, 3, 4], [0.1, 0.2, 0.3, 0.4]).rho == pytest.approx(1.0)
    flat = spearman([1, 2, 3, 4], [0.5] * 4)
    assert flat.rho == 0.0 and flat.tie
    assert spearman_oracle([1, 2, 3, 4], [0.5, 0.7, 0.6, 0.8]) == pytest.approx(0.8)
    assert spearman([1, 2, 3, 4], [0.5, 0.7, 0.6, 0.8]).rho == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(InsufficientSampleError):
        spearman([1, 2], [1, 2])


@settings(max_examples=60, deadline=None)
@given(ys=st.lists(st.integers(0, 5), min_size=3, max_size=12))
def test_spearman_matches_oracle_with_ties(ys):
    xs = list(range(len(ys)))
    r = spearman(xs, ys)
    if len(set(ys)) == 1:
        assert r.tie
    else:
        assert r.rho == pytest.approx(spearman_oracle(xs, ys), abs=1e-12)


# -- adapter-level -----------------------------------------------------------------------------

def test_identity_steering_is_bitwise_noop(toy, toy_trips):
    item = toy_trips[0].yesno
    base = toy.generate(toy.tokenize_with_layout(item))
    pred, _ = steered_generate(toy, item, SteeringSpec("ve", 1.0))
    enc = toy.tokenize_with_layout(item)
    steered = toy.forward_hooked(enc, make_row_transform(SteeringSpec("ve", 1.0), enc.layout))
    assert pred == base.text
    np.testing.assert_array_equal(steered.ids, base.ids)
    np.testing.assert_array_equal(steered.attention.layers, base.attention.layers)


def test_ve_steering_monotone_on_toy(toy, toy_trips):
    for trip in toy_trips[:3]:
        ves = [measure(toy, trip.mcq, SteeringSpec("ve", m)).stats.visual_energy for m in (1, 1.25, 1.5, 2)]
        assert all(b >= a for a, b in zip(ves, ves[1:]))


def test_box_steering_on_toy(toy, toy_trips):
    item = toy_trips[1].yesno
    box = BoxRegion((0, 0, 1, 1), frozenset({0, 1, 8, 9}))
    base = measure(toy, item, SteeringSpec("box", 1.0, box=box)).stats
    out = measure(toy, item, SteeringSpec("box", 3.0, box=box)).stats
    assert out.box_attention > base.box_attention


def test_capability_errors():
    scripted = ScriptedAdapter()
    from framelens.harness.toy import toy_triplets

    item = toy_triplets(1)[0].yesno
    with pytest.raises(CapabilityError):
        steered_generate(scripted, item, SteeringSpec("ve", 2.0))
    with pytest.raises(CapabilityError):
        measure(scripted, item)


def test_ratio_recovery_and_per_sample(toy, toy_trips):
    t = toy_trips[0]
    m = per_sample_multiplier(toy, t.open, t.yesno, "ve")
    rec = ratio_recovery(toy, t.open, t.yesno)
    assert rec.multiplier == pytest.approx(m)
    assert rec.constrained_value < rec.open_value
    assert abs(rec.steered_value - rec.open_value) < abs(rec.constrained_value - rec.open_value)
    assert rec.to_dict()["relative_error"] == rec.relative_error
    box = ratio_recovery(toy, t.open, t.mcq, kind="box")
    assert box.statistic == "box_attention"


def test_multiplier_sweep(toy, toy_trips):
    items = [t.mcq for t in toy_trips[:2]]
    res = multiplier_sweep(toy, items, "ve", [1, 1.5, 2])
    assert len(res.accuracy) == 3 and len(res.records) == 6
    assert res.ve_rho.rho == pytest.approx(1.0)
    assert set(res.to_dict()) >= {"accuracy_rho", "ve_rho", "records"}
    with pytest.raises(InsufficientSampleError):
        multiplier_sweep(toy, items, "ve", [1, 2])
