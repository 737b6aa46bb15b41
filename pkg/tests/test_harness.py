from __future__ import annotations

import json

import numpy as np
import pytest

from framelens.errors import CapabilityError, ConfigError, DumpFormatError, GeometryError
from framelens.harness import ScriptedAdapter, ToyAdapter, ToyConfig, load_dump, require, save_dump, supports, toy_triplets
from framelens.harness.config import load_config
from framelens.harness.images import capped_size
from framelens.harness.plotting import attention_grid, plot_attention, shared_bounds, top_patches
from framelens.harness.synthetic import (
    framing_pair,
    plant_sink,
    random_stack,
    synthetic_layout,
)
from framelens.harness.toy import detokenize, tokenize_text
from framelens.layout import Span, TokenLayout
from framelens.metrics import compute_stats
from framelens.rollout import AttentionStack, causal_mask, rollout

from oracles import brute_rollout

# -- dumps ------------------------------------------------------------------------------------


def _f32_stack(rng, n, L, H):
    # values already representable in float32 so the round trip is exact
    stack = random_stack(n, L, rng, n_heads=H)
    layers = stack.layers.astype(np.float32).astype(np.float64)
    layers /= layers.sum(-1, keepdims=True)
    layers = layers.astype(np.float32).astype(np.float64)
    return AttentionStack(layers, causal_mask(n), heads_reduced=False)


def test_dump_round_trip_is_bit_identical(tmp_path, rng):
    lay = synthetic_layout(grid=(2, 2), n_question=3, n_instruction=1, n_output=2)
    stack = _f32_stack(rng, lay.end(), 4, 2)
    save_dump(stack, lay, {"model_id": "m", "prompt": "p", "framing": "mcq", "sample_id": "s1"}, tmp_path / "d")
    files = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert files == ["layer_0", "layer_1", "layer_2", "layer_3", "meta.json"]
    for ell in range(4):
        raw = np.fromfile(tmp_path / "d" / f"layer_{ell}", dtype="<f4")
        assert raw.size == 2 * lay.end() ** 2
    back, lay2, meta = load_dump(tmp_path / "d")
    assert lay2 == lay
    assert back.layers.shape == (4, 2, lay.end(), lay.end())
    assert np.array_equal(back.layers, stack.layers)
    assert meta["model_id"] == "m" and meta["framing"] == "mcq" and meta["extra"] == {"sample_id": "s1"}


def test_dump_rejects_bad_meta(tmp_path, rng):
    lay = synthetic_layout(grid=(2, 2), n_question=2, n_instruction=1, n_output=1)
    d = save_dump(random_stack(lay.end(), 2, rng, n_heads=1), lay, None, tmp_path / "d")
    meta = json.loads((d / "meta.json").read_text())
    meta["N"] = meta["N"] + 1
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DumpFormatError, match="H\\*N\\*N"):
        load_dump(d)
    meta["N"] -= 1
    meta["L"] = 3
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DumpFormatError, match="L=3"):
        load_dump(d)
    (d / "meta.json").write_text("{")
    with pytest.raises(DumpFormatError):
        load_dump(d)
    with pytest.raises(DumpFormatError):
        load_dump(tmp_path / "missing")


def test_dump_requires_partition(tmp_path, rng):
    lay = TokenLayout(Span(1, 5), Span(5, 6), Span(6, 7), Span(8, 9), grid=(2, 2), image_size=(2, 2), special=(0,))
    with pytest.raises(DumpFormatError, match="partition"):
        save_dump(random_stack(9, 1, rng), lay, None, tmp_path / "d")


def test_dump_of_reduced_stack_has_one_head(tmp_path, rng):
    lay = synthetic_layout(grid=(1, 2), n_question=1, n_instruction=1, n_output=1)
    save_dump(random_stack(lay.end(), 2, rng), lay, None, tmp_path / "d")
    back, _, meta = load_dump(tmp_path / "d")
    assert meta["H"] == 1 and back.layers.shape[1] == 1


def test_golden_dump(fixtures_dir):
    stack, lay, meta = load_dump(fixtures_dir / "golden_dump")
    assert (meta["N"], meta["L"], meta["H"], meta["model_id"]) == (10, 3, 2, "golden-synthetic")
    R = rollout(stack.reduced()).R_final
    frozen = np.load(fixtures_dir / "golden_rollout.npy")
    np.testing.assert_array_equal(R, frozen)
    reduced = stack.layers.mean(axis=1)
    oracle = np.array(brute_rollout([W.tolist() for W in reduced]))
    np.testing.assert_allclose(R, oracle, rtol=0, atol=1e-12)


# -- synthetic ----------------------------------------------------------------------------------

def test_planted_deficit_lowers_ve(rng):
    lay = synthetic_layout()
    open_s, cons_s = framing_pair(lay, 4, rng, factor=0.5)
    ve_o = compute_stats(rollout(open_s), lay).visual_energy
    ve_c = compute_stats(rollout(cons_s), lay).visual_energy
    assert ve_c < ve_o
    cons_s.validate()


def test_plant_sink_keeps_image_total(rng):
    lay = synthetic_layout(grid=(2, 2))
    s = random_stack(lay.end(), 2, rng)
    sunk = plant_sink(s, lay, patch=2, share=0.5)
    img = lay.image_span
    np.testing.assert_allclose(sunk.layers[:, img.stop:, img.slice].sum(-1), s.layers[:, img.stop:, img.slice].sum(-1))
    assert (sunk.layers[:, img.stop:, img.start + 2] >= s.layers[:, img.stop:, img.start + 2]).all()
    with pytest.raises(ValueError):
        plant_sink(s, lay, 0, 1.5)


# -- plotting --------------------------------------------------------------------------------------

def _R_with_image_mass(lay, mass):
    n = lay.end()
    R = np.zeros((n, n))
    for r in lay.output_span:
        R[r, lay.image_span.slice] = mass
        R[r, r] = 1 - np.sum(mass)
    return R


def test_one_hot_heatmap(tmp_path):
    lay = synthetic_layout(grid=(2, 2), n_question=1, n_instruction=1, n_output=2)
    R = _R_with_image_mass(lay, [0, 0, 0.4, 0])
    grid = attention_grid(R, lay)
    assert grid.shape == (2, 2) and grid[1, 0] == pytest.approx(0.4) and grid.sum() == pytest.approx(0.4)
    info = plot_attention(R, lay, np.zeros((28, 28)), tmp_path / "a.png", k=1)
    assert info.top == [2]
    assert (tmp_path / "a.png").stat().st_size > 0
    assert json.loads((tmp_path / "a.png.json").read_text())["top"] == [2]


def test_uniform_ties_go_low():
    assert top_patches(np.full((2, 2), 0.25), k=3) == [0, 1, 2]


def test_shared_bounds_are_used(tmp_path):
    lay = synthetic_layout(grid=(2, 2), n_question=1, n_instruction=1, n_output=1)
    Ra = _R_with_image_mass(lay, [0.1, 0.2, 0.3, 0.0])
    Rb = _R_with_image_mass(lay, [0.05, 0.0, 0.0, 0.6])
    lo, hi = shared_bounds([attention_grid(Ra, lay), attention_grid(Rb, lay)])
    assert (lo, hi) == (0.0, pytest.approx(0.6))
    a = plot_attention(Ra, lay, None, tmp_path / "a.png", vmin=lo, vmax=hi)
    b = plot_attention(Rb, lay, None, tmp_path / "b.png", vmin=lo, vmax=hi)
    assert (a.vmin, a.vmax) == (b.vmin, b.vmax) == (lo, hi)


def test_plot_rejects_mismatched_image(tmp_path):
    lay = synthetic_layout(grid=(2, 2), n_question=1, n_instruction=1, n_output=1)
    R = _R_with_image_mass(lay, [0.1] * 4)
    with pytest.raises(GeometryError):
        plot_attention(R, lay, np.zeros((10, 28)), tmp_path / "x.png")


# -- config -----------------------------------------------------------------------------------------

def test_load_config_sections(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 4\ntoy: {d_model: 8}\ntrain: {lr_peak: 0.1, betas: [0.8, 0.9]}\nsteer: {kind: box}\n")
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.toy.d_model == 8 and cfg.train.lr_peak == 0.1 and cfg.train.betas == (0.8, 0.9)
    assert cfg.steer["kind"] == "box" and cfg.steer["max_tokens"] == 8
    assert load_config(p, {"train": {"K": 2}}).train.K == 2
    assert load_config().train == load_config(None).train


@pytest.mark.parametrize("text", ["bogus: 1\n", "toy: {width: 3}\n", "train: {lr_peak: -1}\n", "steer: {color: red}\n",
                                  "- a\n- b\n", "reframe: {max_retries: -2}\n", "seed: [1\n"])
def test_load_config_errors(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_shipped_configs_load():
    from pathlib import Path

    for p in sorted(Path(__file__).parent.parent.joinpath("configs").glob("*.yaml")):
        load_config(p)


# -- images -------------------------------------------------------------------------------------------

def test_capped_size():
    assert capped_size(1456, 728) == (728, 364)
    assert capped_size(300, 200) == (300, 200)
    assert capped_size(1000, 3000) == (243, 728)
    with pytest.raises(ValueError):
        capped_size(0, 5)


# -- adapters ------------------------------------------------------------------------------------------

def test_capability_checks():
    s = ScriptedAdapter()
    assert supports(s, "generate") and not supports(s, "embed")
    with pytest.raises(CapabilityError, match="embed"):
        require(s, "generate", "embed")
    with pytest.raises(CapabilityError):
        require(s, "forward_capture")


def test_toy_tokenizer_round_trip():
    ids = tokenize_text("What color is the car?")
    assert detokenize(ids) == "what color is the car ?"
    assert tokenize_text("zzz") == tokenize_text("qqq")


def test_toy_layout_and_capture(toy, toy_trips):
    item = toy_trips[0].mcq
    enc = toy.tokenize_with_layout(item)
    lay = enc.layout
    assert len(lay.image_span) == 64 and lay.grid == (8, 8) and lay.image_span.start == 1
    assert lay.end() == enc.n_tokens
    logits, stack = toy.forward_capture(enc)
    assert stack.layers.shape == (4, 2, enc.n_tokens, enc.n_tokens)
    assert stack.layers.dtype == np.float64
    stack.validate()
    assert logits.shape == (enc.n_tokens, toy.config.vocab)


def test_toy_generation_is_deterministic(toy, toy_trips):
    enc = toy.tokenize_with_layout(toy_trips[3].open)
    a, b = toy.generate(enc, 4), toy.generate(enc, 4)
    assert a.text == b.text and 1 <= len(a.layout.output_span) <= 4
    assert a.attention.N == len(a.ids)


def test_toy_planted_shift(toy, toy_trips):
    """Constrained framings draw less visual energy than the open framing on the toy."""
    lower = 0
    for t in toy_trips:
        ve = {}
        for f in ("open", "mcq"):
            enc = toy.tokenize_with_layout(t[f], answer=t[f].gold)
            _, stack = toy.forward_capture(enc)
            ve[f] = compute_stats(rollout(stack.reduced()), enc.layout).visual_energy
        lower += ve["mcq"] < ve["open"]
    assert lower >= 8


def test_toy_seeds_differ():
    assert ToyAdapter(ToyConfig(seed=1)).parameters_hash() != ToyAdapter(ToyConfig(seed=2)).parameters_hash()
    assert ToyAdapter(ToyConfig(seed=1)).parameters_hash() == ToyAdapter(seed=1).parameters_hash()


def test_toy_triplets_are_valid():
    trips = toy_triplets(12, seed=3)
    assert trips == toy_triplets(12, seed=3)
    assert [t.open.category for t in trips[:3]] == ["color", "count", "side"]
    for t in trips:
        assert t.mcq.answer in t.mcq.options and len(set(t.mcq.options)) == 4
    assert [t.yesno.answer for t in trips[:4]] == ["yes", "no", "yes", "no"]


def test_toy_attention_is_reproducible(toy_trips):
    enc_a = ToyAdapter(ToyConfig(seed=0)).tokenize_with_layout(toy_trips[2].yesno)
    _, a = ToyAdapter(ToyConfig(seed=0)).forward_capture(enc_a)
    _, b = ToyAdapter(ToyConfig(seed=0)).forward_capture(enc_a)
    assert np.array_equal(a.layers, b.layers)
