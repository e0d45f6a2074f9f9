import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from personinsert.metrics_eval import (
    ABSENT_COLUMNS,
    REPORT_COLUMNS,
    MetricReport,
    default_extractors,
    evaluate_outputs,
    evaluate_renderer,
    gaussian_window,
    perceptual_distance,
    ssim,
    ssim_map,
)
from personinsert.renderer import RenderPair, canonical_sample, tensor_to_image
from personinsert.semantics import get_reduction, reduce_labels
from personinsert.synthetic import make_fashion_identity

from oracles import luma, scalar_ssim
from toy_models import RENDER, toy_renderer


@pytest.fixture(scope="module")
def extractors():
    return default_extractors()


def tiny_phi(x):
    g = torch.Generator().manual_seed(0)
    w1 = torch.randn(6, 3, 3, 3, generator=g)
    w2 = torch.randn(5, 6, 3, 3, generator=g)
    h = torch.relu(torch.nn.functional.conv2d(x, w1, padding=1))
    return [h, torch.nn.functional.conv2d(h, w2, padding=1)]


# -- ssim ---------------------------------------------------------------------------

def test_ssim_identity_exact():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.integers(0, 256, (40, 33, 3), dtype=np.uint8)
        assert ssim(x, x) == 1.0
    assert ssim(np.full((16, 16), 0.3), np.full((16, 16), 0.3)) == 1.0


def test_ssim_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    for i in range(20):
        a = rng.integers(0, 256, (16, 18, 3), dtype=np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-60, 60, a.shape), 0, 255).astype(np.uint8) if i % 2 else \
            rng.integers(0, 256, a.shape, dtype=np.uint8)
        ref = scalar_ssim(luma(a / 255.0), luma(b / 255.0))
        assert ssim(a, b) == pytest.approx(ref, abs=1e-4)


def test_gaussian_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(w, w.T)


def closed_form_inverse(x, k1=0.01, k2=0.03):
    """Per-window SSIM of x against 1 - x from the window mean m and variance v of x alone:
    the complement has mean 1 - m, the same variance and covariance -v."""
    w = gaussian_window()
    H, W = x.shape
    vals = []
    c1, c2 = k1 ** 2, k2 ** 2
    for y in range(H - 10):
        for xx in range(W - 10):
            p = x[y:y + 11, xx:xx + 11]
            m = (w * p).sum()
            v = (w * p * p).sum() - m * m
            vals.append((2 * m * (1 - m) + c1) * (c2 - 2 * v) / ((m * m + (1 - m) ** 2 + c1) * (2 * v + c2)))
    return float(np.mean(vals))


@pytest.mark.parametrize("pattern", ["checker", "stripes", "random"])
def test_ssim_binary_complement_closed_form(pattern):
    yy, xx = np.mgrid[:24, :24]
    x = {"checker": (yy + xx) % 2, "stripes": xx % 2,
         "random": np.random.default_rng(2).integers(0, 2, (24, 24))}[pattern].astype(float)
    got = ssim(x, 1 - x)
    assert got == pytest.approx(closed_form_inverse(x), abs=1e-9)
    # the stabilising constants keep this above -1; without them the checkerboard reaches it
    print(f"{pattern}: ssim(x, 1-x) = {got:.6f}")
    assert -1 <= got < -0.95 if pattern != "random" else got < 0
    if pattern == "checker":
        assert ssim(x, 1 - x, k1=0, k2=0) == pytest.approx(-1, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(11, 20), st.integers(11, 20))
def test_ssim_symmetric_and_bounded(seed, h, w):
    rng = np.random.default_rng(seed)
    a, b = rng.random((h, w, 3)), rng.random((h, w, 3))
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-9
    assert -1 <= s <= 1


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_map_shape_is_valid_windows():
    assert ssim_map(np.zeros((20, 30)), np.zeros((20, 30))).shape == (10, 20)


# -- perceptual distance ------------------------------------------------------------

def test_perceptual_identity_and_symmetry(extractors):
    rng = np.random.default_rng(3)
    a = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
    for phi in list(extractors.values()) + [tiny_phi]:
        assert perceptual_distance(a, a, phi) == 0.0
        d = perceptual_distance(a, b, phi)
        assert d > 0
        assert abs(d - perceptual_distance(b, a, phi)) <= 1e-9


def test_perceptual_zero_features_stay_finite():
    z = np.zeros((16, 16, 3))
    d = perceptual_distance(z, np.ones((16, 16, 3)), lambda x: [torch.relu(-x)])
    assert np.isfinite(d) and d >= 0


def test_perceptual_monotone_in_noise(extractors):
    amps = np.linspace(0.02, 0.5, 8)
    phi = extractors["Perceptual (VGG)"]
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        base = rng.random((48, 48, 3)) * 0.5 + 0.25
        noise = rng.standard_normal(base.shape)
        d = [perceptual_distance(base, np.clip(base + a * noise, 0, 1), phi) for a in amps]
        rho = spearmanr(amps, d).statistic
        assert rho > 0.9, (trial, d)


def test_perceptual_layer_mismatch():
    with pytest.raises(ValueError):
        perceptual_distance(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)), tiny_phi)


# -- reports ------------------------------------------------------------------------

def fashion_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    table = get_reduction("deepfashion->stage3")
    pairs = []
    for i in range(n):
        a, b = make_fashion_identity(rng, f"id{i}", n_poses=2)
        ia, ma = canonical_sample(a.image, reduce_labels(a.smap, table), RENDER)
        ib, mb = canonical_sample(b.image, reduce_labels(b.smap, table), RENDER)
        pairs.append(RenderPair(ia, ma, ib, mb))
    return pairs


def test_perfect_outputs_score_one_and_zero():
    pairs = fashion_pairs(3)
    targets = [p.image_b for p in pairs]
    rep = evaluate_outputs({"Full": targets}, targets, {"Perceptual (VGG)": tiny_phi})
    assert rep.aggregates["Full"]["SSIM"] == 1.0
    assert rep.aggregates["Full"]["Perceptual (VGG)"] == 0.0


def test_report_aggregates_and_layout():
    rng = np.random.default_rng(4)
    targets = [rng.random((16, 16, 3)) for _ in range(4)]
    outs = {name: [rng.random((16, 16, 3)) for _ in range(4)] for name in ("Baseline", "HR only", "LR only", "Full")}
    ex = {"Perceptual (VGG)": tiny_phi, "Perceptual (SqzNet)": tiny_phi}
    rep = evaluate_outputs(outs, targets, ex)
    assert rep.rows == ["Baseline", "HR only", "LR only", "Full"]
    assert rep.columns == REPORT_COLUMNS and len(rep.columns) == 6
    again = rep.recompute()
    for row in rep.rows:
        for c in rep.columns:
            if c in ABSENT_COLUMNS:
                assert rep.aggregates[row][c] is None
            else:
                assert abs(rep.aggregates[row][c] - again[row][c]) <= 1e-9
    table = rep.format_table().splitlines()
    assert len(table) == 5 and table[1].count("absent") == 3
    lines = [json.loads(x) for x in rep.to_jsonl().splitlines()]
    assert sum(x["kind"] == "record" for x in lines) == 16
    assert sum(x["kind"] == "aggregate" for x in lines) == 4


def test_evaluate_renderer_rows():
    pairs = fashion_pairs(2)
    bundles = {m: toy_renderer(mode=m) for m in ("baseline", "full")}
    rep = evaluate_renderer(pairs, bundles, {"Perceptual (VGG)": tiny_phi})
    assert rep.rows == ["Baseline", "Full"]
    single = evaluate_renderer(pairs, bundles["full"], {"Perceptual (VGG)": tiny_phi})
    assert single.rows == ["Full"]
    out = tensor_to_image(bundles["full"].render(pairs[0].image_a, pairs[0].map_a, pairs[0].map_b))
    assert single.records[0]["SSIM"] == pytest.approx(ssim(out, pairs[0].image_b), abs=5e-3)
    with pytest.raises(ValueError):
        evaluate_renderer([], bundles, {})


def test_report_default_aggregates_from_records():
    recs = [{"model": "Full", "pair": i, "SSIM": v} for i, v in enumerate((0.2, 0.4))]
    rep = MetricReport(["Full"], recs, columns=("SSIM",), absent=())
    assert rep.aggregates["Full"]["SSIM"] == pytest.approx(0.3)
