"""Synthetic optical/SAR quartets with known SAR misalignment.

Scenes are piecewise land-cover regions with per-class spectra and texture.
SAR is rendered from the same ground scene, translated by a known sub-pixel
displacement, as class backscatter plus an edge response, with gamma speckle,
area-averaged onto the 10 m grid and log-compressed to dB. Clouds are
smooth-noise masks alpha-blended over the clear rendering.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .grids import OPTICAL_PIXEL_M, SAR_PIXEL_M, RasterGrid, SampleQuartet
from .io import save_sample
from .manifest import DatasetManifest, ManifestEntry
from .preprocess import preprocess_optical, preprocess_sar
from .tiling import N_BINS, class_histogram

log = logging.getLogger(__name__)

# Reflectance (blue, green, red, nir) per class: forest, rangeland, agriculture, urban, barren, water.
CLASS_SPECTRA = np.array([
    [0.030, 0.055, 0.035, 0.32],
    [0.055, 0.085, 0.075, 0.24],
    [0.065, 0.100, 0.090, 0.38],
    [0.130, 0.140, 0.150, 0.19],
    [0.160, 0.180, 0.215, 0.26],
    [0.070, 0.060, 0.035, 0.02],
])
# Mean backscatter per class in dB (VV, VH).
CLASS_BACKSCATTER_DB = np.array([
    [-8.0, -14.0],
    [-12.0, -20.0],
    [-10.0, -17.0],
    [-3.0, -9.0],
    [-15.0, -25.0],
    [-21.0, -29.0],
])
CLOUD_SPECTRUM = np.array([0.62, 0.64, 0.66, 0.60])
_MARGIN = 12  # optical pixels rendered around the window so shifted SAR has support


@dataclass
class SynthConfig:
    """Generator settings.

    Misalignment magnitudes are in optical (3 m) pixels, drawn uniformly from
    ``[misalign_min, misalign_max]`` in a uniformly random direction. Cloud
    fractions are stratified: sample ``i`` lands in sub-interval ``i % 5`` of
    ``[cloud_min, cloud_max]``.
    """

    n_train: int = 8
    n_test: int = 0
    size: int = 300
    misalign_min: float = 0.0
    misalign_max: float = 5.0
    cloud_min: float = 0.0
    cloud_max: float = 1.0
    region_scale: float = 9.0
    feather: float = 3.0
    speckle_looks: float = 4.0


def _smooth_noise(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def area_resample_matrix(n_src, n_dst):
    """Row-stochastic (n_dst, n_src) matrix averaging source cells by overlap area."""
    edges_src = np.arange(n_src + 1, dtype=np.float64)
    scale = n_src / n_dst
    A = np.zeros((n_dst, n_src))
    for i in range(n_dst):
        lo, hi = i * scale, (i + 1) * scale
        overlap = np.clip(np.minimum(edges_src[1:], hi) - np.maximum(edges_src[:-1], lo), 0, None)
        A[i] = overlap / scale
    return A


def area_downsample(img, n_dst_h, n_dst_w):
    Ah = area_resample_matrix(img.shape[-2], n_dst_h)
    Aw = area_resample_matrix(img.shape[-1], n_dst_w)
    return Ah @ img @ Aw.T


def _cloud_mask(rng, H, W, fraction, sigma):
    noise = _smooth_noise(rng, (H, W), sigma) + 0.35 * _smooth_noise(rng, (H, W), sigma / 3)
    k = int(np.floor(fraction * H * W))
    mask = np.zeros(H * W, dtype=bool)
    if k:
        mask[np.argsort(-noise.ravel(), kind="stable")[:k]] = True
    return mask.reshape(H, W)


def render_scene(rng, H, W, displacement=(0.0, 0.0), cloud_fraction=0.3, cfg=None):
    """Render raw arrays for one AOI of H x W optical pixels.

    Returns a dict with ``cloudy``/``cloudfree`` (4,H,W) reflectance x 10000,
    ``vv``/``vh`` (h,w) in dB, ``landcover`` (1,h,w) codes 0..5 and ``mask``
    (1,H,W), where h, w = 3H/10, 3W/10.
    """
    cfg = cfg or SynthConfig()
    if H % 10 or W % 10:
        raise ValueError(f"AOI extent {H}x{W} must be a multiple of 10")
    h, w = H * 3 // 10, W * 3 // 10
    m = _MARGIN
    Hp, Wp = H + 2 * m, W + 2 * m

    # Land-cover regions on the padded optical grid.
    fields = np.stack([_smooth_noise(rng, (Hp, Wp), cfg.region_scale) for _ in CLASS_SPECTRA])
    fields += 0.6 * rng.standard_normal(len(CLASS_SPECTRA))[:, None, None]
    classes = np.argmax(fields, axis=0)

    texture = 1.0 + 0.12 * _smooth_noise(rng, (Hp, Wp), 1.2) + 0.08 * _smooth_noise(rng, (Hp, Wp), 4.0)
    gain = rng.uniform(0.9, 1.1, size=4)
    ground = CLASS_SPECTRA[classes].transpose(2, 0, 1) * texture[None] * gain[:, None, None]
    ground = np.clip(ground, 0.0, 1.0)
    cloudfree = ground[:, m:m + H, m:m + W]

    # SAR: class backscatter + edge response of the ground scene, translated so that
    # the SAR pixel at x observes ground at x + displacement.
    dx, dy = float(displacement[0]), float(displacement[1])
    luminance = ndimage.gaussian_filter(ground.mean(axis=0), 0.7)
    edge = np.hypot(ndimage.sobel(luminance, axis=0), ndimage.sobel(luminance, axis=1))
    edge = edge / 0.05
    base_lin = 10.0 ** (CLASS_BACKSCATTER_DB[classes] / 10.0)  # (Hp, Wp, 2)
    sar_lin = []
    for pol, edge_gain in ((0, 0.08), (1, 0.025)):
        field = base_lin[..., pol] * (1.0 + 0.25 * (texture - 1.0)) + edge_gain * np.log1p(edge)
        shifted = ndimage.shift(field, (-dy, -dx), order=1, mode="nearest")[m:m + H, m:m + W]
        speckle = rng.gamma(cfg.speckle_looks, 1.0 / cfg.speckle_looks, size=shifted.shape)
        sar_lin.append(area_downsample(shifted * speckle, h, w))
    vv, vh = (10.0 * np.log10(np.maximum(s, 1e-6)) for s in sar_lin)

    # Land cover on the 10 m grid: class at each SAR cell centre (unshifted ground).
    rows = m + np.floor((np.arange(h) + 0.5) * 10 / 3).astype(int)
    cols = m + np.floor((np.arange(w) + 0.5) * 10 / 3).astype(int)
    landcover = classes[np.ix_(rows, cols)][None].astype(np.float64)

    # Clouds: alpha ramps from 0.5 at the mask border to 1 inside; zero outside.
    mask = _cloud_mask(rng, H, W, cloud_fraction, sigma=18.0)
    alpha = np.where(mask, np.clip(0.5 + ndimage.distance_transform_edt(mask) / (2 * cfg.feather), 0, 1), 0.0)
    cloud = CLOUD_SPECTRUM[:, None, None] * (1.0 + 0.1 * _smooth_noise(rng, (H, W), 6.0))[None]
    cloudy = np.where(mask[None], cloudfree * (1 - alpha[None]) + cloud * alpha[None], cloudfree)

    return {
        "cloudy": cloudy * 10000.0,
        "cloudfree": cloudfree * 10000.0,
        "vv": vv,
        "vh": vh,
        "landcover": landcover,
        "mask": mask[None].astype(np.float64),
    }


def _draw_displacement(rng, cfg):
    mag = rng.uniform(cfg.misalign_min, cfg.misalign_max)
    ang = rng.uniform(0.0, 2 * np.pi)
    # + 0.0 normalises -0.0
    return (float(mag * np.cos(ang)) + 0.0, float(mag * np.sin(ang)) + 0.0)


def make_sample(seed, index, cloud_bin_index, aoi_id, cfg):
    rng = np.random.default_rng([seed, index])
    u = rng.uniform()
    frac = cfg.cloud_min + (cfg.cloud_max - cfg.cloud_min) * (cloud_bin_index + u) / N_BINS
    disp = _draw_displacement(rng, cfg)
    raw = render_scene(rng, cfg.size, cfg.size, disp, frac, cfg)
    mask = RasterGrid(raw["mask"], OPTICAL_PIXEL_M, "cloudmask")
    return SampleQuartet(
        cloudy=preprocess_optical(raw["cloudy"]),
        cloudfree=preprocess_optical(raw["cloudfree"]),
        sar=preprocess_sar(raw["vv"], raw["vh"]),
        landcover=RasterGrid(raw["landcover"], SAR_PIXEL_M, "landcover"),
        cloudmask=mask,
        cloud_fraction=float(mask.values.mean(dtype=np.float64)),
        aoi_id=aoi_id,
        displacement=disp,
    )


def synth_generate(cfg, seed, root, force=False):
    """Render ``cfg.n_train + cfg.n_test`` quartets under ``root`` and write the manifest.

    Layout: ``<root>/<split>/<aoi_id>/*.bin`` and ``<root>/manifest.txt``.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    if cfg.n_train + cfg.n_test == 0:
        log.warning("zero samples requested; writing an empty manifest")

    entries = []
    index = 0
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        for i in range(n):
            aoi_id = f"syn{seed}_{split}_{i:05d}"
            sample = make_sample(seed, index, i % N_BINS, aoi_id, cfg)
            rel = f"{split}/{aoi_id}"
            save_sample(root / rel, sample)
            entries.append(ManifestEntry(
                aoi_id=aoi_id,
                split=split,
                path=rel,
                cloud_fraction=sample.cloud_fraction,
                class_hist=class_histogram(sample.landcover),
                displacement=sample.displacement,
            ))
            index += 1
    manifest = DatasetManifest(entries=entries, seed=seed)
    manifest.save(root / "manifest.txt")
    return manifest
