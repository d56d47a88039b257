"""Clip/scale rules for PlanetScope reflectance and Sentinel-1 backscatter,
plus the WorldCover to 6-class land-cover table."""

import numpy as np

from .grids import OPTICAL_PIXEL_M, SAR_PIXEL_M, RasterError, RasterGrid

OPTICAL_MAX = 10000.0
VV_RANGE_DB = (-25.0, 0.0)
VH_RANGE_DB = (-32.5, 0.0)

# WorldCover class codes -> (forest, rangeland, agriculture, urban, barren, water)
WORLDCOVER_NAMES = {
    10: "tree cover",
    20: "shrubland",
    30: "grassland",
    40: "cropland",
    50: "built-up",
    60: "bare/sparse vegetation",
    70: "snow and ice",
    80: "permanent water bodies",
    90: "herbaceous wetland",
    95: "mangroves",
    100: "moss and lichen",
}
WORLDCOVER_TO_CLASS = {
    10: 0,
    20: 1,
    30: 1,
    100: 1,
    40: 2,
    50: 3,
    60: 4,
    70: 4,
    80: 5,
    90: 5,
    95: 5,
}


def _require_finite(arr, what):
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise RasterError(f"{what}: non-finite value {arr[idx]} at index {idx}")


def preprocess_optical(raw):
    """Clip 4-band reflectance to [0, 10000] and scale to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != 4:
        raise RasterError(f"optical: expected (4, H, W), got {raw.shape}")
    _require_finite(raw, "optical")
    out = np.clip(raw, 0.0, OPTICAL_MAX) / OPTICAL_MAX
    return RasterGrid(out.astype(np.float32), OPTICAL_PIXEL_M, "optical4")


def _scale_db(x, lo, hi):
    return (np.clip(x, lo, hi) - lo) / (hi - lo)


def preprocess_sar(raw_vv, raw_vh):
    """Clip VV to [-25, 0] dB and VH to [-32.5, 0] dB, each rescaled to [0, 1]."""
    vv = np.asarray(raw_vv, dtype=np.float64)
    vh = np.asarray(raw_vh, dtype=np.float64)
    if vv.shape != vh.shape or vv.ndim != 2:
        raise RasterError(f"sar: VV {vv.shape} and VH {vh.shape} must be equal 2-D arrays")
    _require_finite(vv, "sar VV")
    _require_finite(vh, "sar VH")
    out = np.stack([_scale_db(vv, *VV_RANGE_DB), _scale_db(vh, *VH_RANGE_DB)])
    return RasterGrid(out.astype(np.float32), SAR_PIXEL_M, "sar2")


def reclassify_landcover(codes):
    """Map WorldCover codes (int array, or names from ``WORLDCOVER_NAMES``) to 0..5."""
    codes = np.asarray(codes)
    if codes.dtype.kind in "US":
        lookup = {name: code for code, name in WORLDCOVER_NAMES.items()}
        unknown = sorted({str(c) for c in np.unique(codes)} - lookup.keys())
        if unknown:
            raise RasterError(f"unknown land-cover codes: {unknown}")
        codes = np.vectorize(lookup.__getitem__, otypes=[np.int64])(codes)
    codes = codes.astype(np.int64)
    unknown = sorted(set(np.unique(codes).tolist()) - WORLDCOVER_TO_CLASS.keys())
    if unknown:
        raise RasterError(f"unknown land-cover codes: {unknown}")
    table = np.zeros(max(WORLDCOVER_TO_CLASS) + 1, dtype=np.float32)
    for src, dst in WORLDCOVER_TO_CLASS.items():
        table[src] = dst
    out = table[codes]
    if out.ndim == 2:
        out = out[None]
    return RasterGrid(out, SAR_PIXEL_M, "landcover")
