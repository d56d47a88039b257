import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aligncr.metrics import (
    PSNR_CAP,
    MetricsReport,
    ReportBuilder,
    bins_csv,
    confusion_matrix,
    mae,
    miou_pa,
    per_bin_report,
    per_class_report,
    psnr,
    sam,
    ssim,
    table_csv,
    upsample_labels,
)


def _img(seed, shape=(4, 30, 30)):
    return np.random.default_rng(seed).random(shape)


# SAM ---------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20), scale=st.floats(1e-3, 1e3))
def test_sam_scale_invariant(seed, scale):
    x = _img(seed, (4, 6, 6)) + 0.01
    assert sam(scale * x, x) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_sam_matches_arccos_definition(seed):
    p, t = _img(seed, (4, 5, 5)), _img(seed + 50, (4, 5, 5))
    cos = (p * t).sum(0) / (np.linalg.norm(p, axis=0) * np.linalg.norm(t, axis=0))
    assert abs(sam(p, t) - np.degrees(np.arccos(cos)).mean()) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_metrics_symmetric(seed):
    p, t = _img(seed, (4, 16, 16)), _img(seed + 1, (4, 16, 16))
    assert mae(p, t) == mae(t, p) and psnr(p, t) == psnr(t, p)
    assert abs(sam(p, t) - sam(t, p)) <= 1e-12 and abs(ssim(p, t) - ssim(t, p)) <= 1e-12


def test_sam_orthogonal_is_90():
    a = np.zeros((4, 3, 3))
    b = np.zeros((4, 3, 3))
    a[0], a[2] = 0.3, 0.7
    b[1], b[3] = 0.5, 0.1
    assert abs(sam(a, b) - 90.0) <= 1e-9


def test_sam_excludes_zero_spectra():
    a, b = _img(0, (4, 2, 2)), _img(1, (4, 2, 2))
    a[:, 0, 0] = 0
    val, excluded = sam(a, b, return_excluded=True)
    assert excluded == 1
    keep = np.ones((2, 2), bool)
    keep[0, 0] = False
    assert val == sam(a, b, region_mask=keep)
    assert sam(np.zeros((4, 2, 2)), b) is None


# SSIM / PSNR / MAE ----------------------------------------------------------------

def test_ssim_identical_is_one():
    x = _img(2)
    assert ssim(x, x) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    from skimage.metrics import structural_similarity

    x = _img(seed, (4, 40, 33))
    y = np.clip(x + 0.1 * _img(seed + 100, (4, 40, 33)) - 0.05, 0, 1)
    ref = np.mean([structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                         data_range=1.0) for a, b in zip(x, y)])
    assert abs(ssim(x, y) - ref) <= 1e-12


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((4, 10, 20)), np.zeros((4, 10, 20)))


def test_psnr_20db():
    y = np.zeros((4, 10, 10))
    assert abs(psnr(y + 0.1, y) - 20.0) <= 1e-9
    assert psnr(y, y) == PSNR_CAP


def test_mae_region_and_empty():
    p, t = _img(3), _img(4)
    m = np.zeros((30, 30), bool)
    m[:10] = True
    assert mae(p, t, m) == np.abs(p[:, :10] - t[:, :10]).mean()
    assert mae(p, t, np.zeros((30, 30))) is None


# per-class -------------------------------------------------------------------------

def _labels_by_physical_index(lc, H, W):
    rows = np.floor(np.arange(H) * 0.3).astype(int)
    cols = np.floor(np.arange(W) * 0.3).astype(int)
    return lc[0][rows][:, cols]


@pytest.mark.parametrize("pattern", ["checker", "blocks"])
def test_per_class_mae_against_direct_masks(pattern):
    h = w = 9
    if pattern == "checker":
        lc = ((np.add.outer(np.arange(h), np.arange(w)) % 2) * 3)[None].astype(float)
    else:
        lc = np.repeat(np.arange(3), 3)[:, None].repeat(w, axis=1)[None].astype(float)
    p, t = _img(5, (4, 30, 30)), _img(6, (4, 30, 30))
    lab = _labels_by_physical_index(lc, 30, 30)
    rep = per_class_report(p, t, lc)
    for c in range(6):
        sel = lab == c
        if sel.any():
            assert abs(rep[c]["mae"] - np.abs(p - t)[:, sel].mean()) <= 1e-12
            assert rep[c]["count"] == int(sel.sum())
        else:
            assert rep[c]["mae"] is None and rep[c]["count"] == 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_per_class_aggregation_identity(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random((4, 30, 30)), rng.random((4, 30, 30))
    lc = rng.integers(0, 6, (1, 9, 9)).astype(float)
    rep = per_class_report(p, t, lc)
    pooled = sum(r["mae"] * r["count"] for r in rep.values() if r["count"]) / sum(r["count"] for r in rep.values())
    assert abs(pooled - mae(p, t)) <= 1e-10


def test_upsample_labels_rule():
    lc = np.arange(9).reshape(1, 3, 3)
    up = upsample_labels(lc)
    assert up.shape == (10, 10)
    assert up[:, 0].tolist() == [0, 0, 0, 0, 3, 3, 3, 6, 6, 6]
    with pytest.raises(ValueError):
        upsample_labels(lc, (11, 10))


def test_report_builder_order_invariant_per_class():
    items = []
    for s in range(4):
        rng = np.random.default_rng(s)
        items.append((rng.random((4, 30, 30)), rng.random((4, 30, 30)),
                      rng.integers(0, 6, (1, 9, 9)).astype(float), rng.random()))
    a, b = ReportBuilder("a"), ReportBuilder("a")
    for it in items:
        a.add(*it)
    for it in reversed(items):
        b.add(*it)
    ra, rb = a.build(), b.build()
    for c in range(6):
        assert ra.per_class[c]["count"] == rb.per_class[c]["count"]
        assert abs(ra.per_class[c]["mae"] - rb.per_class[c]["mae"]) <= 1e-12


# per-bin ---------------------------------------------------------------------------

def test_per_bin_means_and_weighted_identity():
    rng = np.random.default_rng(0)
    rows = [{"cloud_fraction": float(f), "mae": float(m), "psnr": 20.0, "sam_deg": 1.0, "ssim": 0.5}
            for f, m in zip(rng.random(40), rng.random(40))]
    rep = per_bin_report(rows)
    for b, e in rep.items():
        members = [r["mae"] for r in rows if min(int(r["cloud_fraction"] * 5), 4) == b]
        assert e["count"] == len(members) and abs(e["mae"] - np.mean(members)) <= 1e-15
    total = sum(e["mae"] * e["count"] for e in rep.values()) / sum(e["count"] for e in rep.values())
    assert abs(total - np.mean([r["mae"] for r in rows])) <= 1e-12


def test_per_bin_omits_empty_bins():
    rep = per_bin_report([{"cloud_fraction": 0.5, "mae": 0.1, "psnr": None, "sam_deg": 1.0, "ssim": 1.0}])
    assert list(rep) == [2] and rep[2]["psnr"] is None


# label maps ------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(50))
def test_confusion_miou_pa_brute_force(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 6, (16, 16))
    true = rng.integers(0, 6, (16, 16))
    if seed % 5 == 0:
        pred[pred == 2] = 1  # leave a class absent from the prediction
    cm = np.zeros((6, 6), int)
    for t, p in zip(true.ravel(), pred.ravel()):
        cm[t, p] += 1
    res = miou_pa(pred, true)
    assert np.array_equal(res["confusion"], cm)
    correct = sum(int(t == p) for t, p in zip(true.ravel(), pred.ravel()))
    assert res["pa"] == correct / 256
    ious = []
    for c in range(6):
        inter = int(((pred == c) & (true == c)).sum())
        union = int(((pred == c) | (true == c)).sum())
        if union:
            ious.append(inter / union)
    assert res["miou"] == np.mean(ious)


def test_miou_ignores_classes_absent_from_both():
    res = miou_pa(np.zeros((4, 4), int), np.zeros((4, 4), int))
    assert res["classes"] == [0] and res["miou"] == 1.0 and res["pa"] == 1.0


def test_confusion_errors():
    with pytest.raises(ValueError, match="shape"):
        confusion_matrix(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="outside"):
        confusion_matrix(np.full((2, 2), 6), np.zeros((2, 2)))


# reports ---------------------------------------------------------------------------

def _report():
    b = ReportBuilder("demo")
    for s in range(3):
        rng = np.random.default_rng(s)
        b.add(rng.random((4, 30, 30)), rng.random((4, 30, 30)), np.zeros((1, 9, 9)), 0.1 + 0.3 * s)
    return b.build()


def test_report_roundtrip():
    rep = _report()
    assert rep.per_class[1]["mae"] is None
    back = MetricsReport.parse(rep.render())
    assert back == rep


def test_report_parse_rejects_garbage():
    with pytest.raises(ValueError):
        MetricsReport.parse("hello\n")


def test_csv_tables():
    rep = _report()
    lines = table_csv([rep]).splitlines()
    assert lines[0].split(",")[:2] == ["method", "mae_forest"] and len(lines[0].split(",")) == 17
    assert lines[1].split(",")[2] == ""  # rangeland absent
    rows = bins_csv(rep).splitlines()
    assert rows[0].startswith("bin,range") and len(rows) == 1 + len(rep.per_bin)
    assert math.isclose(float(lines[1].split(",")[13]), rep.overall["mae"], rel_tol=1e-5)
