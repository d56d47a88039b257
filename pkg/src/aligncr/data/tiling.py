"""Cloud-cover bins, sliding-window tiling and cloud-stratified selection."""

from __future__ import annotations

import numpy as np

from .grids import (
    LANDCOVER_CLASSES,
    OPTICAL_WINDOW,
    SAR_WINDOW,
    RasterError,
    RasterGrid,
    SampleQuartet,
    check_ratio,
)
from .manifest import DatasetManifest, ManifestEntry

N_BINS = 5


def cloud_bin(fraction):
    """Bin index of a cloud fraction; edges are [0,.2), ..., [.8,1.0]."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"cloud fraction {fraction} outside [0, 1]")
    return min(int(np.floor(fraction * N_BINS)), N_BINS - 1)


def cloud_fraction(mask):
    """Return ``(fraction, bin)`` for a binary cloud mask (array or RasterGrid)."""
    values = mask.values if isinstance(mask, RasterGrid) else np.asarray(mask)
    if not np.all((values == 0) | (values == 1)):
        raise RasterError("cloud mask must be binary")
    frac = float(values.mean(dtype=np.float64)) if values.size else 0.0
    return frac, cloud_bin(frac)


def class_histogram(landcover):
    values = landcover.values if isinstance(landcover, RasterGrid) else np.asarray(landcover)
    return np.bincount(values.astype(np.int64).ravel(), minlength=len(LANDCOVER_CLASSES)).tolist()


def window_count(extent, stride, window=OPTICAL_WINDOW):
    return (extent - window) // stride + 1 if extent >= window else 0


def tile_aoi(cloudy, cloudfree, sar, landcover, mask, stride_opt=OPTICAL_WINDOW, aoi_id="aoi",
             displacement=(0.0, 0.0)):
    """Cut one AOI into congruent 300x300 optical / 90x90 SAR windows.

    All inputs are (C, H, W) arrays: optical pair and mask at 3 m, SAR and
    land cover at 10 m. ``stride_opt`` is in optical pixels and must be a
    multiple of 10 so that the SAR stride ``stride_opt * 3 / 10`` is integral.
    Windows are enumerated row-major and named ``{aoi_id}_r{row}_c{col}``.
    """
    cloudy, cloudfree, sar, landcover, mask = (
        np.asarray(a) for a in (cloudy, cloudfree, sar, landcover, mask)
    )
    H, W = cloudy.shape[1:]
    h, w = sar.shape[1:]
    check_ratio((H, W), (h, w))
    for name, arr, ext in (("cloudfree", cloudfree, (H, W)), ("mask", mask, (H, W)),
                           ("landcover", landcover, (h, w))):
        if arr.shape[1:] != ext:
            raise RasterError(f"{name} extent {arr.shape[1:]} does not match {ext}")
    if stride_opt <= 0 or stride_opt % 10:
        raise RasterError(f"stride {stride_opt} must be a positive multiple of 10")
    stride_sar = stride_opt * 3 // 10

    out = []
    for i in range(window_count(H, stride_opt)):
        for j in range(window_count(W, stride_opt)):
            r, c = i * stride_opt, j * stride_opt
            rs, cs = i * stride_sar, j * stride_sar
            opt_win = np.s_[:, r:r + OPTICAL_WINDOW, c:c + OPTICAL_WINDOW]
            sar_win = np.s_[:, rs:rs + SAR_WINDOW, cs:cs + SAR_WINDOW]
            m = RasterGrid(mask[opt_win], 3.0, "cloudmask")
            frac, _ = cloud_fraction(m)
            out.append(SampleQuartet(
                cloudy=RasterGrid(cloudy[opt_win], 3.0, "optical4"),
                cloudfree=RasterGrid(cloudfree[opt_win], 3.0, "optical4"),
                sar=RasterGrid(sar[sar_win], 10.0, "sar2"),
                landcover=RasterGrid(landcover[sar_win], 10.0, "landcover"),
                cloudmask=m,
                cloud_fraction=frac,
                aoi_id=f"{aoi_id}_r{i}_c{j}",
                displacement=tuple(displacement),
            ))
    return out


def _bin_quotas(n, rng):
    quotas = np.full(N_BINS, n // N_BINS)
    extra = rng.permutation(N_BINS)[: n % N_BINS]
    quotas[extra] += 1
    return quotas


def stratified_select(candidates, n, seed, split="train"):
    """Pick ``n`` samples with per-cloud-bin counts as even as availability allows.

    Candidates are canonically sorted by ``aoi_id`` before any random draw,
    so the result depends only on the candidate set and ``seed``. A bin that
    cannot fill its quota borrows from the nearest bins (lower bin first on
    ties); each borrowed pick is flagged ``fallback`` in the manifest.
    """
    if n < 0 or n > len(candidates):
        raise ValueError(f"cannot select {n} of {len(candidates)} candidates")
    rng = np.random.default_rng(seed)
    ordered = sorted(candidates, key=lambda s: s.aoi_id)
    pools = [[] for _ in range(N_BINS)]
    for s in ordered:
        pools[cloud_bin(s.cloud_fraction)].append(s)
    pools = [[pool[k] for k in rng.permutation(len(pool))] for pool in pools]

    quotas = _bin_quotas(n, rng)
    picked = []  # (sample, fallback_from_bin or None)
    for b in range(N_BINS):
        take = min(quotas[b], len(pools[b]))
        picked += [(s, None) for s in pools[b][:take]]
        pools[b] = pools[b][take:]
        quotas[b] -= take
    for b in range(N_BINS):
        need = quotas[b]
        for d in range(1, N_BINS):
            for nb in (b - d, b + d):
                if need == 0 or not 0 <= nb < N_BINS:
                    continue
                take = min(need, len(pools[nb]))
                picked += [(s, b) for s in pools[nb][:take]]
                pools[nb] = pools[nb][take:]
                need -= take
    picked.sort(key=lambda p: p[0].aoi_id)
    entries = [
        ManifestEntry(
            aoi_id=s.aoi_id,
            split=split,
            path=f"{split}/{s.aoi_id}",
            cloud_fraction=s.cloud_fraction,
            class_hist=class_histogram(s.landcover),
            displacement=tuple(s.displacement),
            fallback_for_bin=fb,
        )
        for s, fb in picked
    ]
    return DatasetManifest(entries=entries, seed=seed)
