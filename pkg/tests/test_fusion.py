"""Fusion, scoring, AUROC and report aggregation."""

import json

import numpy as np
import pytest

from ltoad import tensor as T
from ltoad.archive import SynthConfig, synth_generate
from ltoad.fusion import (
    FLOOR,
    EvalReport,
    Prediction,
    auroc,
    bilinear_resize,
    class_report,
    detect_score,
    fuse,
)


def test_fuse_matches_hand_computed_value():
    got = fuse(np.array([[0.5]]), np.array([[0.25]]), alpha=0.3)
    assert abs(got[0, 0] - 1.0 / 3.4) < 1e-9


def test_fuse_idempotent_on_equal_maps():
    rng = np.random.default_rng(0)
    v = rng.uniform(0.1, 1.0, size=(5, 5))
    np.testing.assert_allclose(fuse(v, v.copy(), 0.3), v, atol=1e-12)


def test_fuse_endpoints_and_swap_symmetry():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.01, 1.0, size=(4, 4))
    b = rng.uniform(0.01, 1.0, size=(4, 4))
    np.testing.assert_allclose(fuse(a, b, 1.0), a, atol=1e-12)
    np.testing.assert_allclose(fuse(a, b, 0.0), b, atol=1e-12)
    np.testing.assert_allclose(fuse(a, b, 0.3), fuse(b, a, 0.7), atol=1e-12)


def test_fuse_floors_zeros_and_validates():
    out = fuse(np.zeros((2, 2)), np.zeros((2, 2)), 0.5)
    np.testing.assert_allclose(out, FLOOR, atol=1e-18)
    assert np.isfinite(out).all()
    with pytest.raises(ValueError):
        fuse(np.zeros((2, 2)), np.zeros((2, 2)), 1.5)
    with pytest.raises(T.ShapeError):
        fuse(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)


def test_detect_score_constant_and_point_source():
    assert detect_score(np.full((32, 32), 0.7)) == pytest.approx(0.7)
    spot = np.zeros((32, 32))
    spot[5, 9] = 1.0
    assert detect_score(spot) == pytest.approx(1.0 / 256.0)


def test_detect_score_clips_kernel_on_small_maps():
    m = np.arange(16, dtype=float).reshape(4, 4)
    assert detect_score(m) == pytest.approx(m.mean())


def test_detect_score_monotone_in_pixels():
    rng = np.random.default_rng(2)
    base = rng.uniform(size=(20, 20))
    s0 = detect_score(base, kernel=5)
    for _ in range(20):
        bumped = base.copy()
        bumped[rng.integers(20), rng.integers(20)] += rng.uniform(0.1, 2.0)
        assert detect_score(bumped, kernel=5) >= s0 - 1e-12


def test_detect_score_consistent_across_integer_upsampling():
    rng = np.random.default_rng(3)
    small = rng.uniform(size=(8, 8))
    big = np.kron(small, np.ones((4, 4)))
    assert detect_score(big, kernel=16) == pytest.approx(
        detect_score(small, kernel=4), abs=1e-12)


def bilinear_ref(src, size):
    out_h, out_w = size
    in_h, in_w = src.shape
    out = np.zeros(size)
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1.0)
            x = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1.0)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (src[y0, x0] * (1 - fy) * (1 - fx)
                         + src[y0, x1] * (1 - fy) * fx
                         + src[y1, x0] * fy * (1 - fx)
                         + src[y1, x1] * fy * fx)
    return out


def test_bilinear_matches_reference_loop():
    rng = np.random.default_rng(4)
    src = rng.uniform(size=(6, 9))
    for size in [(6, 9), (12, 18), (13, 7), (1, 1), (24, 24)]:
        np.testing.assert_allclose(bilinear_resize(src, size),
                                   bilinear_ref(src, size), atol=1e-12)


def test_bilinear_preserves_constants_and_validates():
    np.testing.assert_allclose(bilinear_resize(np.full((3, 3), 0.4), (7, 5)), 0.4)
    with pytest.raises(T.ShapeError):
        bilinear_resize(np.zeros((2, 2, 2)), (4, 4))
    with pytest.raises(ValueError):
        bilinear_resize(np.zeros((2, 2)), (0, 4))


def brute_auroc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_matches_quadratic_oracle_with_ties():
    rng = np.random.default_rng(5)
    scores = np.round(rng.uniform(size=1000), 1)  # heavy ties
    labels = rng.integers(0, 2, size=1000)
    while labels.min() == labels.max():
        labels = rng.integers(0, 2, size=1000)
    assert abs(auroc(scores, labels) - brute_auroc(scores, labels)) < 1e-9


def test_auroc_extremes_and_invariance():
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == pytest.approx(1.0)
    assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == pytest.approx(0.5)
    rng = np.random.default_rng(6)
    s = rng.standard_normal(200)
    y = rng.integers(0, 2, size=200)
    base = auroc(s, y)
    assert auroc(np.exp(s), y) == pytest.approx(base, abs=1e-12)
    assert auroc(3.0 * s + 7.0, y) == pytest.approx(base, abs=1e-12)


def test_auroc_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        auroc([1.0, 2.0], [1, 1])
    with pytest.raises(ValueError):
        auroc([np.nan, 2.0], [0, 1])


def test_prediction_score_uses_detect_score():
    rng = np.random.default_rng(7)
    m = rng.uniform(size=(8, 8))
    pred = Prediction.from_map("r", m, kernel=3)
    assert pred.score == detect_score(m, kernel=3)
    with pytest.raises(ValueError):
        Prediction.from_map("bad", np.array([[np.inf]]))


def small_archive():
    cfg = SynthConfig(class_names=["alpha", "beta"], train_counts=[4, 4],
                      test_normals=2, test_anomalies=2, d_final=6,
                      layer_shapes=((4, 4, 6), (2, 2, 8)), mask_size=(8, 8),
                      patch_range=(1, 2), n_distractors=3)
    return synth_generate(cfg, seed=11)


def perfect_predictions(archive, noise=0.0, rng=None):
    preds = []
    for rec in archive.test_records():
        base = np.zeros((8, 8)) if rec.mask is None else rec.mask.astype(float)
        if noise:
            base = base + rng.uniform(0, noise, size=base.shape)
        preds.append(Prediction.from_map(rec.record_id, base))
    return preds


def test_report_perfect_predictor_scores_one():
    archive = small_archive()
    report = class_report(perfect_predictions(archive), archive, head_set={"alpha"})
    for name, metrics in report.per_class.items():
        assert metrics.image_auroc == pytest.approx(1.0)
        assert metrics.pixel_auroc == pytest.approx(1.0)
    assert report.per_class["alpha"].group == "head"
    assert report.per_class["beta"].group == "tail"
    assert report.aggregates["overall"]["image_auroc"] == pytest.approx(1.0)


def test_report_aggregates_match_reaggregation():
    archive = small_archive()
    rng = np.random.default_rng(8)
    report = class_report(perfect_predictions(archive, noise=0.9, rng=rng),
                          archive, head_set={"alpha"})
    for group, names in [("head", ["alpha"]), ("tail", ["beta"]),
                         ("overall", ["alpha", "beta"])]:
        for metric in ("image_auroc", "pixel_auroc"):
            vals = [getattr(report.per_class[n], metric) for n in names]
            vals = [v for v in vals if v is not None]
            want = float(np.mean(vals)) if vals else None
            assert report.aggregates[group][metric] == pytest.approx(want)


def test_report_single_class_equals_overall():
    archive = small_archive()
    preds = [p for p in perfect_predictions(archive) if p.record_id.startswith("alpha")]
    with pytest.warns(UserWarning):
        report = class_report(preds, archive, head_set={"alpha"})
    assert "beta" not in report.per_class
    assert report.aggregates["overall"]["image_auroc"] == \
        report.per_class["alpha"].image_auroc
    assert report.aggregates["tail"]["image_auroc"] is None
    assert any("beta" in w for w in report.warnings)


def test_report_degenerate_labels_yield_none():
    archive = small_archive()
    normal_only = [p for p in perfect_predictions(archive) if "-good-" in p.record_id]
    with pytest.warns(UserWarning):
        report = class_report(normal_only, archive, head_set=set())
    for metrics in report.per_class.values():
        assert metrics.image_auroc is None
        assert metrics.pixel_auroc is None
    assert report.aggregates["overall"]["image_auroc"] is None


def test_report_validates_ids_and_shapes():
    archive = small_archive()
    with pytest.raises(ValueError, match="no test record"):
        class_report([Prediction.from_map("ghost", np.zeros((8, 8)))],
                     archive, head_set=set())
    bad = [Prediction.from_map(r.record_id, np.zeros((4, 4)))
           for r in archive.test_records() if r.mask is not None][:1]
    other = [Prediction.from_map(r.record_id, np.zeros((8, 8)))
             for r in archive.test_records()
             if bad and r.record_id != bad[0].record_id]
    with pytest.raises(T.ShapeError):
        class_report(bad + other, archive, head_set=set())


def test_report_serialization_roundtrip():
    archive = small_archive()
    report = class_report(perfect_predictions(archive), archive,
                          head_set={"alpha"}, step=3)
    blob = json.loads(report.to_json())
    assert blob["step"] == 3
    assert blob["classes"]["alpha"]["image_auroc"] == pytest.approx(1.0)
    csv = report.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "step,class,group,image_auroc,pixel_auroc"
    assert len(lines) == 1 + 2 + 3  # header + classes + aggregates
    assert lines[1].startswith("3,alpha,head,")
    rebuilt = EvalReport.from_json(report.to_json())
    assert rebuilt.step == report.step
    assert rebuilt.aggregates == report.aggregates
    assert rebuilt.per_class == report.per_class
    assert rebuilt.to_json() == report.to_json()
