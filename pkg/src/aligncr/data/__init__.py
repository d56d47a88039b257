from .grids import (
    BANDS,
    LANDCOVER_CLASSES,
    OPTICAL_WINDOW,
    SAR_WINDOW,
    RasterError,
    RasterGrid,
    SampleQuartet,
)
from .io import load_sample, read_arrays, read_raster, save_sample, write_arrays, write_raster
from .manifest import DatasetManifest, ManifestEntry
from .preprocess import preprocess_optical, preprocess_sar, reclassify_landcover
from .synth import SynthConfig, render_scene, synth_generate
from .tiling import cloud_bin, cloud_fraction, stratified_select, tile_aoi

__all__ = [
    "BANDS",
    "LANDCOVER_CLASSES",
    "OPTICAL_WINDOW",
    "SAR_WINDOW",
    "DatasetManifest",
    "ManifestEntry",
    "RasterError",
    "RasterGrid",
    "SampleQuartet",
    "SynthConfig",
    "cloud_bin",
    "cloud_fraction",
    "load_sample",
    "preprocess_optical",
    "preprocess_sar",
    "read_arrays",
    "read_raster",
    "reclassify_landcover",
    "render_scene",
    "save_sample",
    "stratified_select",
    "synth_generate",
    "tile_aoi",
    "write_arrays",
    "write_raster",
]
