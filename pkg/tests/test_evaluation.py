import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtune.atlas import BBox
from gtune.evaluation import (CNR_CAP, ConstantHeatmapError, EvalConfig, EvalError, EvalRecord, Heatmap,
                              apply_otsu, bilinear_resize, bootstrap_ci, box_region, cnr, cnr_region,
                              evaluate, load_records, miou, miou_region, normalize, oracle_heatmap,
                              otsu_threshold, postprocess)

import oracles
from conftest import FIXTURES


def random_box(rng, H, W, min_side=2):
    x0 = rng.integers(0, W - min_side)
    y0 = rng.integers(0, H - min_side)
    x1 = rng.integers(x0 + min_side, W + 1)
    y1 = rng.integers(y0 + min_side, H + 1)
    return BBox(float(x0), float(y0), float(x1), float(y1))


# ------------------------------------------------------------------ CNR

def test_cnr_textbook_example():
    v = np.zeros((4, 4))
    v[:2] = [[0.7, 0.9, 0.7, 0.9], [0.9, 0.7, 0.9, 0.7]]
    v[2:] = [[0.1, 0.3, 0.1, 0.3], [0.3, 0.1, 0.3, 0.1]]
    got = cnr(v, [BBox(0, 0, 4, 2)])
    assert got == pytest.approx(0.6 / math.sqrt(0.02), rel=1e-12)
    assert got == pytest.approx(4.2426, abs=1e-4)


def test_cnr_region_independent_is_zero():
    v = np.tile([0.2, 0.8], (4, 2))
    assert cnr(v, [BBox(0, 0, 4, 2)]) == pytest.approx(0.0, abs=1e-12)


def test_cnr_matches_two_pass_oracle(rng):
    for _ in range(20):
        H, W = rng.integers(5, 20, 2)
        v = rng.uniform(size=(H, W))
        boxes = [random_box(rng, H, W) for _ in range(rng.integers(1, 3))]
        inside = oracles.pixels_in_boxes(boxes, (H, W))
        if len(inside) in (0, H * W):
            continue
        assert cnr(v, boxes) == pytest.approx(oracles.cnr_two_pass(v, inside), rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 10 ** 6))
def test_cnr_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(size=(8, 9))
    boxes = [BBox(1, 2, 5, 6)]
    assert cnr(a * v + b, boxes) == pytest.approx(cnr(v, boxes), rel=1e-8, abs=1e-10)


def test_cnr_cap_for_binary_maps():
    region = np.zeros((4, 4), dtype=bool)
    region[:2, :2] = True
    assert cnr_region(region.astype(float), region) == (CNR_CAP, True)
    assert cnr_region(1.0 - region, region) == (-CNR_CAP, True)


def test_cnr_errors():
    v = np.random.default_rng(0).uniform(size=(4, 4))
    with pytest.raises(EvalError):
        cnr(v, [BBox(0, 0, 4, 4)])
    with pytest.raises(EvalError):
        cnr_region(v, np.zeros((4, 4), dtype=bool))
    with pytest.raises(ConstantHeatmapError):
        cnr(np.zeros((4, 4)), [BBox(0, 0, 2, 2)])


def test_box_union_and_pixel_centers():
    r = box_region([BBox(0, 0, 2, 2), BBox(1, 1, 3, 3), BBox(3.4, 0, 3.6, 4)], (4, 4))
    want = np.zeros((4, 4), dtype=bool)
    want[:2, :2] = want[1:3, 1:3] = True
    want[:, 3] = True  # a box covering column 3's center at x = 3.5
    np.testing.assert_array_equal(r, want)
    assert not box_region([BBox(0, 0, 0.4, 4)], (4, 4)).any()


# ----------------------------------------------------------------- mIoU

def test_miou_examples():
    ind = np.zeros((10, 10))
    ind[2:6, 3:8] = 1.0
    box = [BBox(3, 2, 8, 6)]
    assert miou(ind, box) == 1.0
    assert miou(1.0 - ind, box) == 0.0
    # binarized area 100, box area 100, overlap 50 -> 1/3
    h = np.zeros((20, 20))
    h[0:10, 5:15] = 0.9
    assert miou(h, [BBox(0, 0, 10, 10)], thresholds=[0.5]) == pytest.approx(1 / 3)


def test_miou_empty_binarization_is_zero():
    assert miou(np.full((4, 4), 0.05), [BBox(0, 0, 2, 2)]) == 0.0


def test_miou_matches_set_oracle(rng):
    for _ in range(20):
        H, W = rng.integers(4, 16, 2)
        v = rng.uniform(size=(H, W))
        boxes = [random_box(rng, H, W)]
        inside = oracles.pixels_in_boxes(boxes, (H, W))
        want = sum(oracles.iou_sets(v, inside, t) for t in (0.1, 0.2, 0.3, 0.4, 0.5)) / 5
        assert miou(v, boxes) == pytest.approx(want, abs=1e-12)


def test_miou_monotone_toward_box(rng):
    region = np.zeros((12, 12), dtype=bool)
    region[3:9, 2:10] = True
    v = rng.uniform(0.0, 0.05, size=(12, 12))
    v[0, 0] = 0.9  # a false positive that stays on throughout
    last = miou_region(v, region)
    for idx in np.argwhere(region):
        v[tuple(idx)] = 0.9
        now = miou_region(v, region)
        assert now >= last
        last = now
    assert last == pytest.approx(region.sum() / (region.sum() + 1))


# ----------------------------------------------------------------- Otsu

def test_otsu_bimodal():
    v = np.r_[np.full(50, 0.1), np.full(50, 0.9)]
    t = otsu_threshold(v)
    assert 0.1 < t < 0.9
    assert np.array_equal(apply_otsu(v) > 0, v > 0.5)


def test_otsu_binary_values():
    v = np.array([0.0, 1.0, 1.0, 0.0, 0.0])
    t = otsu_threshold(v)
    assert np.array_equal(v >= t, v == 1.0)


def test_otsu_matches_exhaustive_oracle(rng):
    for _ in range(20):
        n = rng.integers(20, 400)
        v = np.where(rng.uniform(size=n) < rng.uniform(0.2, 0.8),
                     rng.normal(rng.uniform(0.1, 0.4), 0.05, n), rng.normal(rng.uniform(0.6, 0.9), 0.05, n))
        v = np.clip(v, 0, 1)
        assert otsu_threshold(v) == oracles.otsu_exhaustive(v)


def test_otsu_constant_input():
    with pytest.raises(EvalError):
        otsu_threshold(np.full(10, 0.3))


def test_otsu_keeps_foreground_values():
    v = np.array([0.05, 0.1, 0.7, 0.8, 0.95])
    out = apply_otsu(v)
    np.testing.assert_array_equal(out, [0, 0, 0.7, 0.8, 0.95])


# ------------------------------------------------------------ bootstrap

def test_bootstrap_degenerate():
    assert bootstrap_ci([0.3]) == (0.3, 0.3)
    assert bootstrap_ci([0.1, 0.1, 0.1]) == (0.1, 0.1)


def test_bootstrap_reproducible_and_brackets_mean(rng):
    x = rng.normal(size=30)
    a = bootstrap_ci(x, seed=7)
    assert a == bootstrap_ci(x, seed=7)
    assert a != bootstrap_ci(x, seed=8)
    for level in (0.5, 0.8, 0.95):
        lo, hi = bootstrap_ci(x, resamples=2000, level=level, seed=1)
        assert lo <= x.mean() <= hi


def test_bootstrap_percentiles_by_hand():
    # two values: resampled means are a, (a+b)/2, b with probs 1/4, 1/2, 1/4
    assert bootstrap_ci([0.0, 1.0], seed=3) == (0.0, 1.0)
    lo, hi = bootstrap_ci([0.0, 1.0], level=0.4, seed=3)
    assert lo == hi == 0.5


def test_bootstrap_empty():
    with pytest.raises(EvalError):
        bootstrap_ci([])


# ---------------------------------------------------------- postprocess

def test_postprocess_delta_maps_to_expected_pixel():
    raw = np.zeros((16, 16))
    raw[8, 8] = 1.0
    h = postprocess(raw, (512, 640)).values
    assert h.shape == (512, 640)
    # cell 8's center (8.5 cells) is pixel 272 of the 512 square; the square starts at column 64
    i, j = np.unravel_index(h.argmax(), h.shape)
    assert abs(i - 271.5) <= 1 and abs(j - (64 + 271.5)) <= 1


def test_postprocess_central_block_is_centered():
    raw = np.zeros((16, 16))
    raw[7:9, 7:9] = 1.0
    h = postprocess(raw, (512, 640)).values
    ys, xs = np.nonzero(h == h.max())
    assert abs(ys.mean() - 256) <= 1 and abs(xs.mean() - 320) <= 1


def test_postprocess_square_no_padding(rng):
    h = postprocess(rng.uniform(size=(4, 4)), (32, 32)).values
    assert h.min() == 0.0 and h.max() == 1.0 and np.all(h[0] > -1)


def test_postprocess_padding_is_zero(rng):
    h = postprocess(rng.uniform(0.5, 1.0, size=(4, 4)), (20, 30)).values
    assert np.all(h[:, :5] == 0) and np.all(h[:, 25:] == 0)


def test_postprocess_constant_and_small():
    assert not postprocess(np.full((4, 4), 3.0), (8, 8)).values.any()
    with pytest.raises(EvalError):
        postprocess(np.ones((4, 4)), (1, 8))
    with pytest.raises(EvalError):
        postprocess(np.ones((1, 4)), (8, 8))


def test_bilinear_half_pixel_convention():
    x = np.array([[0.0, 1.0]])
    # output pixel i samples (i + 0.5) * 2 / 4 - 0.5 = -0.25, 0.25, 0.75, 1.25 -> clamped
    np.testing.assert_allclose(bilinear_resize(x, 1, 4), [[0.0, 0.25, 0.75, 1.0]])


def test_postprocess_argmax_within_one_cell(rng):
    for _ in range(10):
        raw = rng.uniform(0, 0.5, size=(16, 16))
        ci, cj = rng.integers(0, 16, 2)
        raw[ci, cj] = 1.0
        h = postprocess(raw, (256, 320)).values
        i, j = np.unravel_index(h.argmax(), h.shape)
        assert abs(i - (ci + 0.5) * 16) <= 16 and abs(j - 32 - (cj + 0.5) * 16) <= 16


def test_normalize_range(rng):
    n = normalize(rng.normal(size=(5, 5)))
    assert n.min() == 0.0 and n.max() == 1.0


# --------------------------------------------------------------- oracle

def test_oracle_parameters():
    h = oracle_heatmap([BBox(100, 100, 400, 400)], (512, 512)).values
    # mu = (250, 250), sigma = 100; pixel (i, j) sits at (j + 0.5, i + 0.5)
    def g(i, j):
        return math.exp(-((j + 0.5 - 250) ** 2 + (i + 0.5 - 250) ** 2) / (2 * 100 ** 2))
    corners = [g(0, 0), g(0, 511), g(511, 0), g(511, 511)]
    lo, hi = min(corners), g(249, 249)
    for i, j in [(249, 249), (249, 349), (149, 249), (10, 480)]:
        assert h[i, j] == pytest.approx((g(i, j) - lo) / (hi - lo), rel=1e-9)


def test_oracle_argmax_in_box_and_max_combination():
    boxes = [BBox(10, 10, 40, 30), BBox(60, 50, 90, 90)]
    h = oracle_heatmap(boxes, (100, 120)).values
    i, j = np.unravel_index(h.argmax(), h.shape)
    assert any(b.x_min <= j < b.x_max and b.y_min <= i < b.y_max for b in boxes)
    a = oracle_heatmap(boxes[:1], (100, 120)).values
    assert h.max() == 1.0 and h.min() == 0.0 and a.shape == h.shape


def test_oracle_centered_quarter_box_cnr():
    box = [BBox(128, 128, 384, 384)]
    value = cnr(oracle_heatmap(box, (512, 512)), box)
    assert value > 1
    assert value == pytest.approx(1.97957703379, abs=1e-9)


# -------------------------------------------------------------- reports

def test_golden_two_class_report(tmp_path):
    records = load_records(FIXTURES / "eval_two_class" / "records.jsonl")
    report = evaluate(records, EvalConfig())
    assert report.table() == (FIXTURES / "eval_two_class" / "golden_report.txt").read_text()
    assert report.dumps_jsonl() == (FIXTURES / "eval_two_class" / "golden_report.jsonl").read_text()

    def var(xs):
        m = sum(xs) / len(xs)
        return sum((x - m) ** 2 for x in xs) / len(xs), m

    F = Fraction
    (va, ma), (vb, mb) = var([F(1), F(3, 4), F(3, 4), F(5, 8)]), var([F(3, 8), F(1, 4), F(1, 8)] + [F(0)] * 9)
    cnr_p = float(ma - mb) / math.sqrt(va + vb)
    miou_p = float((F(4, 7) + F(4, 6) + F(4, 5) + 2) / 5)
    (va, ma), (vb, mb) = var([F(3, 4), F(1), F(5, 8), F(7, 8)]), var([F(1, 4)] + [F(0)] * 11)
    cnr_a = float(ma - mb) / math.sqrt(va + vb)
    p, a = report.classes
    assert (p.class_name, p.n, a.class_name, a.n) == ("Pneumonia", 2, "Atelectasis", 2)
    assert p.cnr_mean == pytest.approx(cnr_p, rel=1e-12) and p.cnr_ci == (p.cnr_mean, p.cnr_mean)
    assert p.miou_mean == pytest.approx(miou_p, rel=1e-12)
    assert a.cnr_mean == pytest.approx(cnr_a, rel=1e-12) and a.cnr_missing == 1
    assert a.miou_mean == pytest.approx(0.46, rel=1e-12)
    assert a.miou_ci[0] == 0.0 and a.miou_ci[1] == pytest.approx(0.92, rel=1e-12)
    assert report.cnr_average == pytest.approx((cnr_p + cnr_a) / 2, rel=1e-12)
    assert report.miou_average == pytest.approx((miou_p + 0.46) / 2, rel=1e-12)


def test_empty_stream():
    report = evaluate([], EvalConfig())
    assert report.classes == [] and report.cnr_average is None
    assert json.loads(report.dumps_jsonl())["class"] == "Average"


def test_oracle_self_consistency(rng):
    records, own = [], []
    for k in range(6):
        boxes = [random_box(rng, 40, 50, min_side=6)]
        hm = oracle_heatmap(boxes, (40, 50)).values
        records.append(EvalRecord(f"i{k}", "Pneumonia" if k % 2 else "Edema", boxes, hm, (40, 50)))
        own.append(miou(hm, boxes))
    report = evaluate(records, EvalConfig(resamples=500))
    by = {c.class_name: c for c in report.classes}
    assert by["Edema"].miou_mean == pytest.approx(np.mean(own[0::2]), abs=1e-12)
    assert by["Pneumonia"].miou_mean == pytest.approx(np.mean(own[1::2]), abs=1e-12)
    assert [c.class_name for c in report.classes] == ["Pneumonia", "Edema"]


def test_worker_pool_preserves_order(rng):
    records = [EvalRecord(f"i{k}", "Pneumonia", [random_box(rng, 20, 20, 4)], rng.uniform(size=(8, 8)), (20, 20))
               for k in range(5)]
    one = evaluate(records, EvalConfig(resamples=200, workers=1))
    two = evaluate(records, EvalConfig(resamples=200, workers=2))
    assert one.dumps_jsonl() == two.dumps_jsonl()


def test_otsu_flag_changes_scores(rng):
    raw = rng.uniform(0, 0.4, size=(16, 16))
    raw[4:8, 4:8] = 0.9
    rec = EvalRecord("x", "Pneumonia", [BBox(4, 4, 8, 8)], raw, (16, 16))
    plain = evaluate([rec], EvalConfig(resamples=10)).classes[0]
    otsu = evaluate([rec], EvalConfig(resamples=10, use_otsu=True)).classes[0]
    assert otsu.miou_mean == 1.0 and plain.miou_mean < 0.5


def test_record_validation(tmp_path):
    with pytest.raises(EvalError):
        EvalRecord("x", "Fracture", [BBox(0, 0, 1, 1)], np.zeros((2, 2)), (2, 2)).check()
    with pytest.raises(EvalError):
        EvalRecord("x", "Edema", [], np.zeros((2, 2)), (2, 2)).check()
    with pytest.raises(EvalError):
        EvalRecord("x", "Edema", [BBox(0, 0, 5, 1)], np.zeros((2, 2)), (2, 2)).check()
    (tmp_path / "r.jsonl").write_text('{"image_id": "x"}\n')
    with pytest.raises(EvalError):
        load_records(tmp_path / "r.jsonl")


def test_heatmap_wrapper_accepted():
    h = Heatmap(np.eye(4))
    assert cnr(h, [BBox(0, 0, 2, 2)]) == cnr(np.eye(4), [BBox(0, 0, 2, 2)])
