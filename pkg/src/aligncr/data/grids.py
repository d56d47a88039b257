"""Raster containers for optical, SAR, land-cover and cloud-mask grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTICAL_WINDOW = 300
SAR_WINDOW = 90
OPTICAL_PIXEL_M = 3.0
SAR_PIXEL_M = 10.0

# Optical band order in every 4-band stack (PlanetScope analytic order).
BANDS = ("blue", "green", "red", "nir")

LANDCOVER_CLASSES = ("forest", "rangeland", "agriculture", "urban", "barren", "water")

KIND_CHANNELS = {"optical4": 4, "sar2": 2, "landcover": 1, "cloudmask": 1}
KIND_RANGE = {
    "optical4": (0.0, 1.0),
    "sar2": (0.0, 1.0),
    "landcover": (0.0, float(len(LANDCOVER_CLASSES) - 1)),
    "cloudmask": (0.0, 1.0),
}


class RasterError(ValueError):
    """A raster violates its kind, shape or value-range contract."""


@dataclass(eq=False)
class RasterGrid:
    """Multi-channel 2-D float32 array tagged with its kind and pixel size.

    Args:
        values: Array of shape (channels, height, width).
        pixel_size_m: Ground sampling distance in metres.
        kind: One of ``optical4``, ``sar2``, ``landcover``, ``cloudmask``.
    """

    values: np.ndarray
    pixel_size_m: float
    kind: str

    def __post_init__(self):
        if self.kind not in KIND_CHANNELS:
            raise RasterError(f"unknown raster kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise RasterError(f"{self.kind}: expected (C, H, W), got shape {self.values.shape}")
        if self.values.shape[0] != KIND_CHANNELS[self.kind]:
            raise RasterError(
                f"{self.kind}: expected {KIND_CHANNELS[self.kind]} channels, got {self.values.shape[0]}"
            )
        if not self.pixel_size_m > 0:
            raise RasterError(f"pixel size must be positive, got {self.pixel_size_m}")

    @property
    def value_range(self) -> tuple[float, float]:
        return KIND_RANGE[self.kind]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def validate(self) -> "RasterGrid":
        """Raise :class:`RasterError` unless every value honours the kind's range."""
        v = self.values
        if not np.all(np.isfinite(v)):
            raise RasterError(f"{self.kind}: non-finite values")
        lo, hi = self.value_range
        if v.size == 0:
            return self
        vmin, vmax = float(v.min()), float(v.max())
        if vmin < lo or vmax > hi:
            raise RasterError(f"{self.kind}: values span [{vmin}, {vmax}], outside [{lo}, {hi}]")
        if self.kind == "landcover" and not np.all(v == np.round(v)):
            raise RasterError("landcover: non-integer class codes")
        if self.kind == "cloudmask" and not np.all((v == 0) | (v == 1)):
            raise RasterError("cloudmask: values must be 0 or 1")
        return self

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.pixel_size_m == other.pixel_size_m
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(eq=False)
class SampleQuartet:
    """One co-registered training/evaluation unit.

    ``displacement`` is the known (dx, dy) shift, in optical pixels, applied to
    the SAR rendering of synthetic samples: the SAR pixel at position ``x``
    observes ground at ``x + displacement``. It is ``(0, 0)`` for real data.
    """

    cloudy: RasterGrid
    cloudfree: RasterGrid
    sar: RasterGrid
    landcover: RasterGrid
    cloudmask: RasterGrid
    cloud_fraction: float
    aoi_id: str
    displacement: tuple[float, float] = field(default=(0.0, 0.0))

    def validate(self) -> "SampleQuartet":
        expected = {
            "cloudy": "optical4",
            "cloudfree": "optical4",
            "sar": "sar2",
            "landcover": "landcover",
            "cloudmask": "cloudmask",
        }
        for name, kind in expected.items():
            grid = getattr(self, name)
            if grid.kind != kind:
                raise RasterError(f"{name}: expected kind {kind}, got {grid.kind}")
            grid.validate()
        hi = self.cloudy.shape[1:]
        for name in ("cloudfree", "cloudmask"):
            if getattr(self, name).shape[1:] != hi:
                raise RasterError(f"{name} extent {getattr(self, name).shape[1:]} != cloudy extent {hi}")
        lo = self.sar.shape[1:]
        if self.landcover.shape[1:] != lo:
            raise RasterError(f"landcover extent {self.landcover.shape[1:]} != sar extent {lo}")
        check_ratio(hi, lo)
        frac = float(self.cloudmask.values.mean(dtype=np.float64))
        if abs(frac - self.cloud_fraction) > 1e-6:
            raise RasterError(f"cloud_fraction {self.cloud_fraction} != mask mean {frac}")
        return self

    def __eq__(self, other):
        if not isinstance(other, SampleQuartet):
            return NotImplemented
        return (
            self.aoi_id == other.aoi_id
            and self.cloud_fraction == other.cloud_fraction
            and tuple(self.displacement) == tuple(other.displacement)
            and all(
                getattr(self, n) == getattr(other, n)
                for n in ("cloudy", "cloudfree", "sar", "landcover", "cloudmask")
            )
        )


def check_ratio(optical_hw, sar_hw):
    """Require optical extents to be exactly 10/3 of the SAR extents."""
    (H, W), (h, w) = tuple(optical_hw), tuple(sar_hw)
    if 3 * H != 10 * h or 3 * W != 10 * w:
        raise RasterError(
            f"optical extent {H}x{W} is not 10/3 of SAR extent {h}x{w} "
            f"(ratios {H / max(h, 1):.4g}, {W / max(w, 1):.4g})"
        )
