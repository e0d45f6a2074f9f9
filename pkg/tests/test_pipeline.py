import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from personinsert.knowledge_base import featurize, retrieve
from personinsert.pipeline import (
    CATEGORIES,
    PipelineError,
    appearance_swap,
    composite,
    diversity_generate,
    generate_person,
    scene_placement,
    swap_with_mask,
    transformed_mask,
    write_bundle,
)
from personinsert.renderer import image_to_tensor
from personinsert.semantics import PlacementRecord

from toy_models import (
    CANVAS,
    NaNRenderer,
    fixed_coarse_model,
    toy_coarse,
    toy_exemplar,
    toy_kb,
    toy_renderer,
)


@pytest.fixture(scope="module")
def world():
    scene, coarse = toy_coarse(0)
    kb = toy_kb()
    renderer = toy_renderer()
    return scene, coarse, kb, renderer


def gendered_exemplar(kb):
    return toy_exemplar(gender=kb.entries[0].gender)


# -- compositing --------------------------------------------------------------------

def random_triple(rng):
    H, W = rng.integers(20, 80, 2)
    scene = rng.integers(0, 256, (H, W, 3), dtype=np.uint8)
    S = int(rng.integers(8, 40))
    rendered = rng.integers(0, 256, (S, S, 3), dtype=np.uint8)
    mask = rng.random((S, S)) < rng.uniform(0, 1)
    scale = float(rng.uniform(0.2, 3.0))
    w, h = int(rng.integers(1, 2 * W)), int(rng.integers(1, 2 * H))
    x0, y0 = int(rng.integers(-W // 2, W)), int(rng.integers(-H // 2, H))
    rec = PlacementRecord(scale, int(rng.integers(0, S)), int(rng.integers(0, S)), (x0, y0, w, h))
    return scene, rendered, mask, rec


def test_composite_outside_mask_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(100):
        scene, rendered, mask, rec = random_triple(rng)
        out, _ = composite(scene, rendered, mask, rec)
        tmask = transformed_mask(scene.shape, mask, rec)
        assert np.array_equal(out[~tmask], scene[~tmask])
        assert out.dtype == scene.dtype and out.shape == scene.shape


def test_composite_zero_mask_is_identity():
    rng = np.random.default_rng(1)
    scene, rendered, mask, rec = random_triple(rng)
    out, _ = composite(scene, rendered, np.zeros_like(mask), rec)
    assert np.array_equal(out, scene)


def test_composite_full_mask_stays_in_box():
    rng = np.random.default_rng(2)
    scene = rng.integers(0, 256, (50, 60, 3), dtype=np.uint8)
    rendered = np.full((16, 16, 3), 7, np.uint8)
    rec = PlacementRecord(0.5, 0, 0, (10, 5, 32, 32))
    out, clipped = composite(scene, rendered, np.ones((16, 16), bool), rec)
    inside = np.zeros((50, 60), bool)
    inside[5:37, 10:42] = True
    assert np.array_equal(out[~inside], scene[~inside])
    assert (out[inside] == 7).all()
    assert not clipped


def test_composite_area_integer_scale():
    rng = np.random.default_rng(3)
    mask = rng.random((16, 16)) < 0.4
    rec = PlacementRecord(0.5, 0, 0, (4, 4, 32, 32))  # every canvas pixel covers 2x2 scene pixels
    tm = transformed_mask((50, 50), mask, rec)
    assert tm.sum() == 4 * mask.sum()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 4.0), st.integers(4, 20), st.integers(4, 20))
def test_composite_area_rectangle(scene_per_canvas, rw, rh):
    mask = np.zeros((24, 24), bool)
    mask[2:2 + rh, 3:3 + rw] = True
    w, h = max(1, round(rw * scene_per_canvas)), max(1, round(rh * scene_per_canvas))
    rec = PlacementRecord(1 / scene_per_canvas, 3, 2, (0, 0, w, h))
    count = transformed_mask((200, 200), mask, rec).sum()
    expected = scene_per_canvas ** 2 * mask.sum()
    # rounding can shift each box edge by at most one scene pixel
    assert abs(count - expected) <= (w + h + 1) + (scene_per_canvas + 1) * (rw + rh) + 1


def test_composite_clipping_flag():
    scene = np.zeros((20, 20, 3), np.uint8)
    out, clipped = composite(scene, np.full((10, 10, 3), 9, np.uint8), np.ones((10, 10), bool),
                             PlacementRecord(1.0, 0, 0, (15, 15, 10, 10)))
    assert clipped
    assert (out[15:, 15:] == 9).all() and not out[:15].any()


def test_scene_placement_matches_coarse_box():
    scene_rec = PlacementRecord(0.5, 0, 10, (0, 0, 128, 108))  # scene 108x128 -> canvas 64
    mask = np.zeros((32, 32), bool)
    mask[4:28, 10:20] = True
    rec = scene_placement((20, 20, 10, 30), scene_rec, mask, (108, 128))
    x0, y0, w, h = rec.crop_box
    assert h == 60 and w == 25  # coarse height 30 canvas px -> 60 scene px; width scales alike
    assert y0 + h == 2 * (20 + 30 - 10)  # bottoms coincide
    assert x0 + w / 2 == pytest.approx(2 * 25, abs=0.5)  # centres coincide
    assert (rec.pad_left, rec.pad_top) == (10, 4)


# -- generation ----------------------------------------------------------------------

def test_generate_top1_and_audit_trail(world):
    scene, coarse, kb, renderer = world
    ex = gendered_exemplar(kb)
    res = generate_person(scene, ex, kb, coarse, renderer)
    query = featurize([res.coarse_map], kb.scheme, query=True)[0]
    best = retrieve(kb, query, ex.gender)[0]
    assert res.candidate_ids[0] == best[0].id
    assert res.retrieval_scores[0] == best[1]
    assert res.modified_scene.shape == scene.image.shape
    assert res.refined_map.shape == (32, 32)
    tm = transformed_mask(scene.image.shape, res.person_mask, res.paste)
    assert np.array_equal(res.modified_scene[~tm], scene.image[~tm])
    assert tm.any()


def test_generate_is_deterministic(world):
    scene, coarse, kb, renderer = world
    ex = gendered_exemplar(kb)
    a = generate_person(scene, ex, kb, coarse, renderer, top_index=1, seed=5)
    b = generate_person(scene, ex, kb, coarse, renderer, top_index=1, seed=5)
    assert np.array_equal(a.modified_scene, b.modified_scene)
    assert a.refined_map == b.refined_map and a.paste == b.paste
    assert a.retrieval_scores == b.retrieval_scores


def test_top_indices_give_distinct_refined_maps(world):
    scene, coarse, kb, renderer = world
    ex = gendered_exemplar(kb)
    refined = [generate_person(scene, ex, kb, coarse, renderer, top_index=i).refined_map for i in range(5)]
    assert all(refined[i] != refined[j] for i in range(5) for j in range(i + 1, 5))


def test_diversity_shares_coarse_stage(world):
    scene, coarse, kb, renderer = world
    ex = gendered_exemplar(kb)
    results = diversity_generate(scene, ex, kb, coarse, renderer, k=4)
    assert len(results) == 4
    for r in results[1:]:
        assert r.coarse_map == results[0].coarse_map
        assert r.placement == results[0].placement and r.coarse_box == results[0].coarse_box
    scores = [r.retrieval_scores[-1] for r in results]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    single = generate_person(scene, ex, kb, coarse, renderer)
    assert np.array_equal(diversity_generate(scene, ex, kb, coarse, renderer, k=1)[0].modified_scene,
                          single.modified_scene)


def test_failure_categories(world):
    scene, coarse, kb, renderer = world
    ex = gendered_exemplar(kb)
    cases = {}
    empty = fixed_coarse_model(np.zeros((CANVAS, CANVAS), np.uint8))
    cases["positional"] = lambda: generate_person(scene, ex, kb, empty, renderer)
    other = "men" if ex.gender == "women" else "women"
    keep = [e.gender == ex.gender for e in kb.entries]
    no_gender = type(kb)(entries=[e for e, k in zip(kb.entries, keep) if k], features=kb.features[keep],
                         clusters=kb.clusters, scheme=kb.scheme, maps=kb.maps)
    cases["contextual"] = lambda: generate_person(scene, toy_exemplar(gender=other), no_gender, coarse, renderer)
    in_padding = np.zeros((CANVAS, CANVAS), np.uint8)
    in_padding[0:6, 30:34] = 4  # the 240x320 scene occupies canvas rows 8..55 only
    cases["scale"] = lambda: generate_person(scene, ex, kb, fixed_coarse_model(in_padding), renderer)
    nan = NaNRenderer(renderer.generator, renderer.discriminator, renderer.config)
    cases["rendering"] = lambda: generate_person(scene, ex, kb, coarse, nan)
    assert set(cases) == set(CATEGORIES)
    for category, run in cases.items():
        with pytest.raises(PipelineError) as info:
            run()
        assert info.value.category == category


def test_top_index_beyond_pool(world):
    scene, coarse, kb, renderer = world
    with pytest.raises(PipelineError) as info:
        generate_person(scene, gendered_exemplar(kb), kb, coarse, renderer, top_index=500)
    assert info.value.category == "contextual"


def test_bundle_bytes_are_reproducible(world, tmp_path):
    scene, coarse, kb, renderer = world
    ex = gendered_exemplar(kb)
    for name in ("a", "b"):
        write_bundle(generate_person(scene, ex, kb, coarse, renderer), tmp_path / name)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["top_index"] == 0 and len(manifest["retrieval_scores"]) == 1


# -- appearance swap ------------------------------------------------------------------

def test_swap_reductions():
    g = torch.Generator().manual_seed(0)
    target, generated = torch.rand(3, 8, 8, generator=g), torch.rand(3, 8, 8, generator=g)
    assert torch.equal(swap_with_mask(target, generated, np.zeros((8, 8), bool)), target)
    assert torch.equal(swap_with_mask(target, generated, np.ones((8, 8), bool)), generated)


def test_appearance_swap_region(world):
    *_, renderer = world
    target, style = toy_exemplar(3), toy_exemplar(4)
    out = appearance_swap(target, style, "upper_wear", renderer)
    outside = target.smap.labels != 4
    assert torch.equal(out[:, outside], image_to_tensor(target.image)[:, outside])
    generated = renderer.render(style.image, style.smap, target.smap)
    assert torch.equal(out[:, ~outside], generated[:, ~outside])


def test_appearance_swap_errors(world):
    *_, renderer = world
    target = toy_exemplar(3)
    with pytest.raises(ValueError):
        appearance_swap(target, target, "face", renderer)
    lab = target.smap.labels.copy()
    lab[lab == 1] = 2  # remove the hair
    from personinsert.pipeline import Exemplar
    from personinsert.semantics import SemanticMap
    bald = Exemplar(target.image, SemanticMap(lab, target.smap.taxonomy), target.gender)
    with pytest.raises(ValueError, match="absent"):
        appearance_swap(bald, target, "hair", renderer)
