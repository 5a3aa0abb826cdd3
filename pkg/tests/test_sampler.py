import dataclasses

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from styleadapter.adaptation import adapted_projections
from styleadapter.checkpoint import FinetuneResidual
from styleadapter.errors import ShapeError
from styleadapter.sampler import (SampleOptions, cfg_combine, ddim_timesteps, encode_reference, generate,
                                  generate_from_embedding, generate_mixed, read_png_metadata)
from styleadapter.style_encoder import average_style_embeddings
from styleadapter.toydata import render
from styleadapter.utils import ParameterAccessTracker

FAST = SampleOptions(steps=4, seed=3)


def test_options_validation():
    for bad in ({"steps": 0}, {"cfg_scale": -1}, {"eta": 2.0}):
        with pytest.raises(ValueError):
            SampleOptions(**bad)
    d = SampleOptions()
    assert (d.steps, d.cfg_scale, d.eta) == (50, 9.0, 0.0)


def test_cfg_combine_examples():
    c, u = torch.full((2,), 2.0), torch.ones(2)
    assert torch.equal(cfg_combine(c, u, 9.0), torch.full((2,), 10.0))
    assert torch.equal(cfg_combine(c, u, 1.0), c)
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    with pytest.raises(ShapeError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), s=st.floats(-5, 5))
def test_cfg_combine_affine_in_scale(seed, s):
    gen = torch.Generator().manual_seed(seed)
    c, u = torch.randn(5, generator=gen, dtype=torch.float64), torch.randn(5, generator=gen, dtype=torch.float64)
    outs = [cfg_combine(c, u, x) for x in (0.0, 1.0, s)]
    assert torch.allclose(outs[2], outs[0] + s * (outs[1] - outs[0]), atol=1e-10)


def test_timesteps():
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 999 and ts[1] == 979 and ts[-1] == 19
    assert ddim_timesteps(1000, 1) == [999]
    assert len(set(ddim_timesteps(1000, 1000))) == 1000


def test_deterministic(trained_tiny_model, rand_image):
    a, _ = generate(trained_tiny_model, "a circle", [rand_image(0)], opts=FAST)
    b, _ = generate(trained_tiny_model, "a circle", [rand_image(0)], opts=FAST)
    assert torch.equal(a, b)
    c, _ = generate(trained_tiny_model, "a circle", [rand_image(0)], opts=dataclasses.replace(FAST, seed=4))
    assert not torch.equal(a, c)


def test_thread_count_invariance(trained_tiny_model, rand_image):
    prev = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a, _ = generate(trained_tiny_model, "a square", [rand_image(1)], opts=FAST)
        torch.set_num_threads(2)
        b, _ = generate(trained_tiny_model, "a square", [rand_image(1)], opts=FAST)
    finally:
        torch.set_num_threads(prev)
    assert torch.equal(a, b)


def test_thread_setting_restored(trained_tiny_model):
    prev = torch.get_num_threads()
    try:
        torch.set_num_threads(3)
        generate(trained_tiny_model, "a square", opts=dataclasses.replace(FAST, threads=1))
        assert torch.get_num_threads() == 3
    finally:
        torch.set_num_threads(prev)
    with pytest.raises(ValueError):
        SampleOptions(threads=0)


def test_single_step_valid_image(trained_tiny_model):
    img, _ = generate(trained_tiny_model, "a circle", opts=SampleOptions(steps=1))
    assert img.shape == (3, 16, 16) and img.min() >= 0 and img.max() <= 1


def test_clipped_excess_not_fed_back(trained_tiny_model, monkeypatch):
    # predictor claims x0 = 3 while noisy and zero noise near the end: the clamped trajectory must land near white
    ab_all = trained_tiny_model.schedule.alpha_bars

    def predictor(x, t, ctx, aca=None):
        ab = ab_all[t].item()
        if t < 200:
            return torch.zeros_like(x)
        return (x - ab**0.5 * 3.0) / (1 - ab) ** 0.5

    monkeypatch.setattr(trained_tiny_model, "predict_noise", predictor)
    img, _ = generate(trained_tiny_model, "a circle", opts=SampleOptions(steps=20, cfg_scale=1.0, seed=0))
    assert img.mean() > 0.75


def test_no_content_adapter_reads(trained_tiny_model, rand_image):
    with ParameterAccessTracker(trained_tiny_model.aca.parameters()) as tracker:
        generate(trained_tiny_model, "a circle", [rand_image(0)], opts=FAST)
    assert tracker.reads == 0
    with ParameterAccessTracker(trained_tiny_model.aca.parameters()) as tracker:
        trained_tiny_model.aca(torch.rand(1, 3, 16, 16))
    assert tracker.reads > 0


def test_two_predict_calls_per_step(trained_tiny_model, monkeypatch):
    calls = []
    real = trained_tiny_model.predict_noise
    monkeypatch.setattr(trained_tiny_model, "predict_noise", lambda *a, **k: calls.append(a[1]) or real(*a, **k))
    generate(trained_tiny_model, "a circle", opts=FAST)
    assert len(calls) == 2 * FAST.steps


def test_average_factorization(trained_tiny_model, rand_image):
    refs = [rand_image(0), rand_image(1)]
    a, _ = generate(trained_tiny_model, "a cross", refs, opts=FAST)
    emb = average_style_embeddings([encode_reference(trained_tiny_model, r) for r in refs])
    b = generate_from_embedding(trained_tiny_model, "a cross", emb, FAST)
    assert torch.equal(a, b)


def test_plain_text_to_image_ignores_style_pathway(trained_tiny_model, monkeypatch):
    a, meta = generate(trained_tiny_model, "a circle", opts=FAST)
    monkeypatch.setattr(trained_tiny_model.style_encoder, "encode_style", lambda *a, **k: pytest.fail("used"))
    b, _ = generate(trained_tiny_model, "a circle", opts=FAST)
    assert torch.equal(a, b) and meta["style_refs"] == []


def test_sidecar_isolation(trained_tiny_model, rand_image):
    ref = [rand_image(2)]
    zero_shot, _ = generate(trained_tiny_model, "a circle", ref, opts=FAST)
    res = FinetuneResidual({n: torch.full((p.d_out,), 0.5) for n, p in adapted_projections(trained_tiny_model)})
    tuned, _ = generate(trained_tiny_model, "a circle", ref, residual=res, opts=FAST)
    again, _ = generate(trained_tiny_model, "a circle", ref, opts=FAST)
    assert not torch.equal(tuned, zero_shot)
    assert torch.equal(again, zero_shot)


def test_alpha_scale_ablation(trained_tiny_model, rand_image):
    ref = [rand_image(3)]
    one, _ = generate(trained_tiny_model, "a circle", ref, opts=FAST)
    zero, _ = generate(trained_tiny_model, "a circle", ref, opts=dataclasses.replace(FAST, alpha_scale=0.0))
    assert not torch.equal(one, zero)
    with torch.no_grad():
        for _, p in adapted_projections(trained_tiny_model):
            p.delta_up.zero_()
    no_lora, _ = generate(trained_tiny_model, "a circle", ref, opts=FAST)
    assert torch.equal(no_lora, zero)


def test_alpha_restored_after_sampling(trained_tiny_model):
    before = [p.alpha_runtime_scale for _, p in adapted_projections(trained_tiny_model)]
    generate(trained_tiny_model, "a circle", opts=dataclasses.replace(FAST, alpha_scale=0.0))
    assert [p.alpha_runtime_scale for _, p in adapted_projections(trained_tiny_model)] == before


def test_self_mix_equals_single(trained_tiny_model, rand_image):
    img = rand_image(5)
    single, _ = generate(trained_tiny_model, "a circle", [img], opts=FAST)
    mixed, meta = generate_mixed(trained_tiny_model, "a circle", img, img, img, FAST)
    assert torch.equal(single, mixed)
    assert len(set(meta["provenance"].values())) == 1


def test_swapping_high_source_changes_output(trained_tiny_model, rand_image):
    a, b = rand_image(6), rand_image(7)
    x, meta = generate_mixed(trained_tiny_model, "a circle", a, a, a, FAST)
    y, meta2 = generate_mixed(trained_tiny_model, "a circle", a, a, b, FAST)
    assert not torch.equal(x, y)
    assert meta2["provenance"]["high"] != meta2["provenance"]["low"]


def test_mixed_residual_policy(trained_tiny_model, rand_image):
    a, b = rand_image(6), rand_image(7)
    ida = encode_reference(trained_tiny_model, a).source_level_map["low"]
    res = FinetuneResidual({n: torch.full((p.d_out,), 0.5) for n, p in adapted_projections(trained_tiny_model)},
                           {"style_refs": [ida]})
    _, m1 = generate_mixed(trained_tiny_model, "a circle", a, a, a, FAST, residual=res)
    _, m2 = generate_mixed(trained_tiny_model, "a circle", a, a, b, FAST, residual=res)
    _, m3 = generate_mixed(trained_tiny_model, "a circle", a, a, b, FAST, residual=res, force_residual=True)
    assert (m1["residual_applied"], m2["residual_applied"], m3["residual_applied"]) == (True, False, True)


def test_png_written_with_metadata(trained_tiny_model, tmp_path):
    ref = tmp_path / "style.png"
    render("ocean", "waves", "circle", size=32).save(ref)
    out = tmp_path / "out.png"
    generate(trained_tiny_model, "a circle", [ref], opts=FAST, out_path=out)
    meta = read_png_metadata(out)
    assert meta["prompt"] == "a circle" and meta["options"]["seed"] == 3
    assert len(meta["style_refs"]) == 1 and len(meta["style_refs"][0]) == 16


def test_unreadable_style_image(trained_tiny_model, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_text("not an image")
    with pytest.raises(OSError):
        generate(trained_tiny_model, "a circle", [bad], opts=FAST)
