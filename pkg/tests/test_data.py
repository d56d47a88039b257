import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aligncr.data.grids import RasterError, RasterGrid, check_ratio
from aligncr.data.io import load_sample, read_arrays, read_raster, save_sample, write_arrays, write_raster
from aligncr.data.manifest import DatasetManifest, ManifestEntry
from aligncr.data.preprocess import (
    WORLDCOVER_TO_CLASS,
    preprocess_optical,
    preprocess_sar,
    reclassify_landcover,
)
from aligncr.data.synth import SynthConfig, area_resample_matrix, make_sample, render_scene, synth_generate
from aligncr.data.tiling import N_BINS, cloud_bin, cloud_fraction, stratified_select, tile_aoi, window_count


# preprocessing ----------------------------------------------------------------

def test_optical_clip_scale_anchors():
    raw = np.array([12000.0, 10000.0, 5000.0, 0.0, -3.0])
    out = preprocess_optical(np.broadcast_to(raw, (4, 1, 5)).copy()).values[0, 0]
    assert out.tolist() == [1.0, 1.0, 0.5, 0.0, 0.0]


def test_sar_clip_scale_anchors():
    vv = np.array([[-30.0, -25.0, -12.5, 0.0, 4.0]])
    vh = np.array([[-40.0, -32.5, -16.25, 0.0, 2.0]])
    out = preprocess_sar(vv, vh).values
    assert out[0, 0].tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]
    assert out[1, 0].tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e5, 1e5), min_size=4, max_size=4))
def test_preprocess_output_in_unit_range(vals):
    a = np.array(vals).reshape(4, 1, 1)
    assert preprocess_optical(a).validate()
    assert preprocess_sar(a[0], a[1]).validate()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2e4, 2e4), min_size=8, max_size=8))
def test_preprocess_idempotent_and_monotone(vals):
    a = np.array(vals).reshape(4, 1, 2)
    once = preprocess_optical(a).values.astype(np.float64)
    again = preprocess_optical(once * 10000.0).values
    assert np.abs(again - once).max() <= 1e-7
    vv, vh = a[0], a[1] / 1000.0
    s1 = preprocess_sar(vv, vh).values
    s2 = preprocess_sar(vv + 0.5, vh + 0.5).values
    o2 = preprocess_optical(a + 100.0).values
    assert (s2 >= s1).all() and (o2 >= once.astype(np.float32)).all()
    back = preprocess_sar(s1[0] * 25.0 - 25.0, s1[1] * 32.5 - 32.5).values
    assert np.abs(back - s1).max() <= 1e-7


def test_preprocess_rejects_non_finite_and_bad_shape():
    raw = np.zeros((4, 3, 3))
    raw[2, 1, 0] = np.nan
    with pytest.raises(RasterError, match=r"\(2, 1, 0\)"):
        preprocess_optical(raw)
    with pytest.raises(RasterError):
        preprocess_optical(np.zeros((3, 3, 3)))
    with pytest.raises(RasterError):
        preprocess_sar(np.zeros((2, 2)), np.zeros((2, 3)))


def test_reclassify_table_and_names():
    codes = np.array(sorted(WORLDCOVER_TO_CLASS))[None]
    out = reclassify_landcover(codes).values[0, 0]
    assert out.tolist() == [0, 1, 1, 2, 3, 4, 4, 5, 5, 5, 1]
    assert reclassify_landcover(np.array([["tree cover", "permanent water bodies"]])).values.tolist() == [[[0, 5]]]
    with pytest.raises(RasterError, match="unknown"):
        reclassify_landcover(np.array([[10, 11]]))


# grids and io -------------------------------------------------------------------

def test_ratio_check():
    check_ratio((300, 300), (90, 90))
    check_ratio((160, 40), (48, 12))
    with pytest.raises(RasterError, match="10/3"):
        check_ratio((300, 300), (91, 90))


def test_raster_kind_contracts():
    with pytest.raises(RasterError):
        RasterGrid(np.zeros((3, 4, 4)), 3.0, "optical4")
    with pytest.raises(RasterError):
        RasterGrid(np.full((1, 2, 2), 0.5), 3.0, "cloudmask").validate()
    with pytest.raises(RasterError):
        RasterGrid(np.full((1, 2, 2), 2.5), 10.0, "landcover").validate()


def test_raster_roundtrip_bitwise(tmp_path):
    g = RasterGrid(np.random.default_rng(0).random((4, 7, 5)), 3.0, "optical4")
    write_raster(tmp_path / "r.bin", g)
    assert read_raster(tmp_path / "r.bin") == g


def test_raster_truncated_payload(tmp_path):
    g = RasterGrid(np.zeros((2, 3, 3)), 10.0, "sar2")
    write_raster(tmp_path / "r.bin", g)
    (tmp_path / "r.bin").write_bytes((tmp_path / "r.bin").read_bytes()[:-4])
    with pytest.raises(RasterError, match="payload"):
        read_raster(tmp_path / "r.bin")


def test_sample_roundtrip_bitwise(tmp_path, small_sample):
    save_sample(tmp_path / "s", small_sample)
    assert load_sample(tmp_path / "s") == small_sample


def test_array_bundle_roundtrip(tmp_path):
    arrs = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(3, dtype=np.int64),
            "c": np.random.default_rng(1).random((2, 2, 2))}
    write_arrays(tmp_path / "x.bin", arrs)
    back = read_arrays(tmp_path / "x.bin")
    assert list(back) == list(arrs)
    for k in arrs:
        assert back[k].dtype == arrs[k].dtype and back[k].tobytes() == arrs[k].tobytes()


def test_manifest_roundtrip():
    m = DatasetManifest(seed=3, entries=[
        ManifestEntry("a", "train", "train/a", 0.1, [1, 2, 0, 0, 0, 3], (0.5, -1.25)),
        ManifestEntry("b", "test", "test/b", 1 / 3, [0] * 6, (0.0, 0.0), fallback_for_bin=2),
    ])
    back = DatasetManifest.parse(m.render())
    assert back == m


def test_manifest_rejects_cross_split_duplicates():
    e = ManifestEntry("a", "train", "train/a", 0.1)
    with pytest.raises(ValueError, match="both"):
        DatasetManifest(entries=[e, ManifestEntry("a", "test", "test/a", 0.1)]).validate()


# tiling -------------------------------------------------------------------------

def test_cloud_bin_edges():
    assert [cloud_bin(f) for f in (0.0, 0.1999, 0.2, 0.4, 0.6, 0.8, 0.99, 1.0)] == [0, 0, 1, 2, 3, 4, 4, 4]
    with pytest.raises(ValueError):
        cloud_bin(1.01)


def test_window_count_exhaustive():
    for extent in range(300, 901, 10):
        for stride in range(10, 310, 10):
            brute = sum(1 for r in range(0, extent) if r % stride == 0 and r + 300 <= extent)
            assert window_count(extent, stride) == brute
    assert window_count(290, 10) == 0


def _aoi(H, W, seed=0):
    rng = np.random.default_rng(seed)
    h, w = H * 3 // 10, W * 3 // 10
    return (rng.random((4, H, W)), rng.random((4, H, W)), rng.random((2, h, w)),
            rng.integers(0, 6, (1, h, w)).astype(float), (rng.random((1, H, W)) > 0.5).astype(float))


def test_tile_aoi_congruent_windows():
    cloudy, cloudfree, sar, lc, mask = _aoi(600, 400)
    tiles = tile_aoi(cloudy, cloudfree, sar, lc, mask, stride_opt=100, aoi_id="x")
    assert len(tiles) == window_count(600, 100) * window_count(400, 100) == 4 * 2
    t = tiles[3]
    assert t.aoi_id == "x_r1_c1"
    assert np.array_equal(t.cloudy.values, cloudy[:, 100:400, 100:400].astype(np.float32))
    assert np.array_equal(t.sar.values, sar[:, 30:120, 30:120].astype(np.float32))
    assert t.cloud_fraction == float(mask[:, 100:400, 100:400].mean())
    for t in tiles:
        t.validate()


def test_tile_aoi_errors():
    cloudy, cloudfree, sar, lc, mask = _aoi(300, 300)
    with pytest.raises(RasterError, match="stride"):
        tile_aoi(cloudy, cloudfree, sar, lc, mask, stride_opt=15)
    with pytest.raises(RasterError, match="10/3"):
        tile_aoi(cloudy, cloudfree, sar[:, :-1], lc[:, :-1], mask)


def _candidates(counts):
    out = []
    for b, n in enumerate(counts):
        for i in range(n):
            s = make_sample(0, 100 * b + i, b, f"c{b}_{i:03d}", SynthConfig(size=30))
            out.append(s)
    return out


def test_stratified_select_balanced_and_deterministic():
    cands = _candidates([6, 6, 6, 6, 6])
    a = stratified_select(cands, 10, seed=4)
    b = stratified_select(list(reversed(cands)), 10, seed=4)
    assert a == b
    bins = np.bincount([cloud_bin(e.cloud_fraction) for e in a.entries], minlength=N_BINS)
    assert bins.tolist() == [2] * 5
    assert all(e.fallback_for_bin is None for e in a.entries)


def test_stratified_select_borrows_from_nearest_bin():
    cands = _candidates([4, 0, 4, 4, 4])
    m = stratified_select(cands, 10, seed=0)
    assert len(m) == 10
    borrowed = [e for e in m.entries if e.fallback_for_bin is not None]
    assert len(borrowed) == 2 and all(e.fallback_for_bin == 1 for e in borrowed)
    assert {cloud_bin(e.cloud_fraction) for e in borrowed} <= {0, 2}
    with pytest.raises(ValueError):
        stratified_select(cands, 17, seed=0)


# synthetic generator ------------------------------------------------------------

def test_synth_deterministic(tmp_path):
    cfg = SynthConfig(n_train=3, n_test=2, size=60)
    m1 = synth_generate(cfg, 5, tmp_path / "a")
    m2 = synth_generate(cfg, 5, tmp_path / "b")
    assert m1 == m2
    for e in m1.entries:
        assert load_sample(tmp_path / "a" / e.path) == load_sample(tmp_path / "b" / e.path)
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()


def test_synth_refuses_to_overwrite(tmp_path):
    cfg = SynthConfig(n_train=1, size=30)
    synth_generate(cfg, 0, tmp_path / "a")
    with pytest.raises(FileExistsError):
        synth_generate(cfg, 0, tmp_path / "a")
    synth_generate(cfg, 1, tmp_path / "a", force=True)


def test_synth_zero_misalignment():
    s = make_sample(2, 0, 1, "z", SynthConfig(size=60, misalign_min=0.0, misalign_max=0.0))
    assert s.displacement == (0.0, 0.0)


def test_synth_misalignment_magnitude_range():
    cfg = SynthConfig(size=30, misalign_min=2.0, misalign_max=4.0)
    for i in range(30):
        d = np.hypot(*make_sample(0, i, 0, "m", cfg).displacement)
        assert 2.0 - 1e-12 <= d <= 4.0 + 1e-12


def test_synth_mask_matches_fraction_and_cloudy_equals_clear_outside():
    s = make_sample(1, 3, 2, "m", SynthConfig(size=60))
    m = s.cloudmask.values[0] > 0
    assert s.cloud_fraction == cloud_fraction(s.cloudmask)[0]
    assert np.array_equal(s.cloudy.values[:, ~m], s.cloudfree.values[:, ~m])
    assert not np.array_equal(s.cloudy.values[:, m], s.cloudfree.values[:, m])


def test_synth_cloud_bins_uniform_over_500():
    cfg = SynthConfig(size=60)
    bins = [cloud_bin(make_sample(9, i, i % N_BINS, "h", cfg).cloud_fraction) for i in range(500)]
    assert np.bincount(bins, minlength=N_BINS).tolist() == [100] * 5


def test_synth_displacement_shifts_sar_not_landcover():
    # 10 optical pixels = 3 SAR pixels; near-noiseless speckle isolates the translation
    cfg = SynthConfig(speckle_looks=1e12)
    base = render_scene(np.random.default_rng(0), 60, 60, (0.0, 0.0), 0.3, cfg)
    moved = render_scene(np.random.default_rng(0), 60, 60, (10.0, 0.0), 0.3, cfg)
    assert np.array_equal(base["landcover"], moved["landcover"])
    for pol in ("vv", "vh"):
        np.testing.assert_allclose(moved[pol][:, :-3], base[pol][:, 3:], atol=1e-4)
        assert np.abs(moved[pol] - base[pol]).max() > 0.1


@settings(max_examples=30, deadline=None)
@given(n_src=st.integers(1, 60), n_dst=st.integers(1, 60))
def test_area_resample_rows_sum_to_one(n_src, n_dst):
    A = area_resample_matrix(n_src, n_dst)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
    assert (A >= 0).all()
