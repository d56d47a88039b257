"""Image-quality metrics, per-class / per-cloud-bin breakdowns, and label-map scores.

All functions take numpy arrays shaped (C, H, W) with values in [0, 1]
unless noted. Values that cannot be computed (empty selections) are
returned as ``None`` rather than zero.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data.grids import LANDCOVER_CLASSES
from .data.tiling import N_BINS, cloud_bin

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def _region(mask, shape):
    if mask is None:
        return np.ones(shape[-2:], dtype=bool)
    m = np.asarray(mask)
    m = m[0] if m.ndim == 3 else m
    if m.shape != tuple(shape[-2:]):
        raise ValueError(f"region mask {m.shape} does not match image extent {shape[-2:]}")
    return m.astype(bool)


def mae(pred, target, region_mask=None):
    """Mean absolute error over all channels of the selected pixels, or None if none are selected."""
    pred, target = _f64(pred), _f64(target)
    sel = _region(region_mask, pred.shape)
    n = int(sel.sum())
    if n == 0:
        return None
    return float(np.abs(pred - target)[:, sel].mean())


def mse(pred, target):
    return float(np.mean((_f64(pred) - _f64(target)) ** 2))


def psnr(pred, target):
    """PSNR in dB for peak 1; zero error maps to :data:`PSNR_CAP`."""
    err = mse(pred, target)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def _angles(pred, target, sel):
    p = _f64(pred)[:, sel]
    t = _f64(target)[:, sel]
    np_, nt = np.linalg.norm(p, axis=0), np.linalg.norm(t, axis=0)
    valid = (np_ > 0) & (nt > 0)
    u, v = p[:, valid] / np_[valid], t[:, valid] / nt[valid]
    # half-angle form of arccos(u.v); stays accurate for nearly parallel spectra
    ang = 2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0))
    return np.degrees(ang), int((~valid).sum())


def sam(pred, target, region_mask=None, return_excluded=False):
    """Mean spectral angle in degrees; pixels where either spectrum is zero are excluded.

    Returns None when no pixel has two non-zero spectra.
    """
    ang, excluded = _angles(pred, target, _region(region_mask, np.shape(pred)))
    val = float(ang.mean()) if ang.size else None
    return (val, excluded) if return_excluded else val


def _gauss(img):
    # 11-tap window (radius 5) at sigma 1.5; only the fully supported region is kept
    return ndimage.gaussian_filter(img, SSIM_SIGMA, mode="constant", truncate=5 / SSIM_SIGMA)


def ssim(pred, target):
    """Mean local SSIM per band (Gaussian 11x11, sigma 1.5, data range 1), averaged over bands."""
    pred, target = _f64(pred), _f64(target)
    if pred.shape != target.shape:
        raise ValueError(f"shapes differ: {pred.shape} vs {target.shape}")
    H, W = pred.shape[-2:]
    if H < SSIM_WIN or W < SSIM_WIN:
        raise ValueError(f"image {H}x{W} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    r = SSIM_WIN // 2
    vals = []
    for x, y in zip(pred, target):
        mx, my = _gauss(x), _gauss(y)
        vx = _gauss(x * x) - mx * mx
        vy = _gauss(y * y) - my * my
        cxy = _gauss(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s[r:H - r, r:W - r].mean())
    return float(np.mean(vals))


def upsample_labels(labels, size=None):
    """Nearest 10/3 upsampling of a (1, h, w) or (h, w) label map, rows ``floor(3i/10)``."""
    lab = np.asarray(labels)
    lab = lab[0] if lab.ndim == 3 else lab
    h, w = lab.shape
    H, W = size or (h * 10 // 3, w * 10 // 3)
    if 3 * H != 10 * h or 3 * W != 10 * w:
        raise ValueError(f"label map {h}x{w} cannot be upsampled 10/3 to {H}x{W}")
    return lab[np.ix_(np.arange(H) * 3 // 10, np.arange(W) * 3 // 10)]


@dataclass
class ClassStats:
    """Sufficient statistics for pooled per-class MAE and SAM."""

    abs_sum: float = 0.0
    n_pixels: int = 0
    angle_sum: float = 0.0
    n_angles: int = 0

    def add(self, other):
        self.abs_sum += other.abs_sum
        self.n_pixels += other.n_pixels
        self.angle_sum += other.angle_sum
        self.n_angles += other.n_angles

    def values(self, n_channels=4):
        mae_v = self.abs_sum / (self.n_pixels * n_channels) if self.n_pixels else None
        sam_v = self.angle_sum / self.n_angles if self.n_angles else None
        return {"mae": mae_v, "sam_deg": sam_v, "count": self.n_pixels}


def class_stats(pred, target, landcover, n_classes=len(LANDCOVER_CLASSES)):
    labels = upsample_labels(landcover, np.shape(pred)[-2:])
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    diff = np.abs(_f64(pred) - _f64(target)).sum(axis=0)
    out = {}
    for c in range(n_classes):
        sel = labels == c
        ang, _ = _angles(pred, target, sel)
        out[c] = ClassStats(float(diff[sel].sum()), int(sel.sum()), float(ang.sum()), int(ang.size))
    return out


def per_class_report(pred, target, landcover, n_classes=len(LANDCOVER_CLASSES)):
    """MAE and SAM over each land-cover class's pixels; absent classes have None values and count 0."""
    return {c: s.values(np.shape(pred)[0]) for c, s in class_stats(pred, target, landcover, n_classes).items()}


def sample_metrics(pred, target):
    return {"mae": mae(pred, target), "psnr": psnr(pred, target), "sam_deg": sam(pred, target), "ssim": ssim(pred, target)}


def per_bin_report(samples):
    """Average per-sample metrics within each cloud-fraction bin.

    Args:
        samples (list[dict]): each with ``cloud_fraction`` and metric keys
            (``mae``, ``psnr``, ``sam_deg``, ``ssim``).

    Returns:
        dict: bin -> metric means plus ``count``; empty bins are omitted.
    """
    groups = {}
    for s in samples:
        groups.setdefault(cloud_bin(s["cloud_fraction"]), []).append(s)
    out = {}
    for b in sorted(groups):
        rows = groups[b]
        entry = {}
        for k in ("mae", "psnr", "sam_deg", "ssim"):
            vals = [r[k] for r in rows if r.get(k) is not None]
            entry[k] = float(np.mean(vals)) if vals else None
        entry["count"] = len(rows)
        out[b] = entry
    return out


def confusion_matrix(pred_labels, true_labels, n_classes=len(LANDCOVER_CLASSES)):
    p = np.asarray(pred_labels).astype(np.int64).ravel()
    t = np.asarray(true_labels).astype(np.int64).ravel()
    if np.shape(pred_labels) != np.shape(true_labels):
        raise ValueError(f"label maps differ in shape: {np.shape(pred_labels)} vs {np.shape(true_labels)}")
    for name, a in (("predicted", p), ("true", t)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} labels outside 0..{n_classes - 1}")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_pa(pred_labels, true_labels, n_classes=len(LANDCOVER_CLASSES)):
    """Pixel accuracy and mean IoU over classes present in prediction or truth.

    Returns:
        dict: ``miou``, ``pa``, ``iou`` (class -> IoU for counted classes),
        ``classes`` (counted class list) and ``confusion`` (rows = truth).
    """
    cm = confusion_matrix(pred_labels, true_labels, n_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = [c for c in range(n_classes) if cm[c].sum() + cm[:, c].sum() > 0]
    iou = {c: tp[c] / (tp[c] + fp[c] + fn[c]) for c in present}
    total = cm.sum()
    return {
        "miou": float(np.mean(list(iou.values()))) if iou else None,
        "pa": float(tp.sum() / total) if total else None,
        "iou": {c: float(v) for c, v in iou.items()},
        "classes": present,
        "confusion": cm,
    }


OVERALL_KEYS = ("mae", "psnr", "sam_deg", "ssim")
CLASS_KEYS = ("mae", "sam_deg", "count")
BIN_KEYS = ("mae", "psnr", "sam_deg", "ssim", "count")


@dataclass
class MetricsReport:
    """Overall, per-class and per-cloud-bin metrics for one evaluated model."""

    overall: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    per_bin: dict = field(default_factory=dict)
    n_samples: int = 0
    name: str = "model"

    def render(self):
        """Line-oriented text: ``<section> [<key>] metric=value ...``."""
        def fmt(v):
            return "na" if v is None else repr(v)

        lines = [f"# aligncr-report v1 name={self.name} n_samples={self.n_samples}"]
        lines.append("overall " + " ".join(f"{k}={fmt(self.overall.get(k))}" for k in OVERALL_KEYS))
        for c in sorted(self.per_class):
            lines.append(f"class {c} " + " ".join(f"{k}={fmt(self.per_class[c].get(k))}" for k in CLASS_KEYS))
        for b in sorted(self.per_bin):
            lines.append(f"bin {b} " + " ".join(f"{k}={fmt(self.per_bin[b].get(k))}" for k in BIN_KEYS))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        def val(k, v):
            if v == "na":
                return None
            return int(v) if k == "count" else float(v)

        def kv(tokens):
            return {k: val(k, v) for k, v in (t.split("=", 1) for t in tokens)}

        lines = text.splitlines()
        if not lines or not lines[0].startswith("# aligncr-report v1"):
            raise ValueError("not an aligncr report")
        head = dict(t.split("=", 1) for t in lines[0].split()[3:])
        rep = cls(name=head["name"], n_samples=int(head["n_samples"]))
        for line in lines[1:]:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "overall":
                rep.overall = kv(tok[1:])
            elif tok[0] == "class":
                rep.per_class[int(tok[1])] = kv(tok[2:])
            elif tok[0] == "bin":
                rep.per_bin[int(tok[1])] = kv(tok[2:])
            else:
                raise ValueError(f"unknown report line {line!r}")
        return rep

    def __eq__(self, other):
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return (self.overall, self.per_class, self.per_bin, self.n_samples, self.name) == (
            other.overall, other.per_class, other.per_bin, other.n_samples, other.name)


class ReportBuilder:
    """Accumulates per-sample results into a :class:`MetricsReport`.

    Overall and per-bin values are means of per-sample metrics; per-class
    values pool pixels across samples through summed statistics, so the
    order samples are added in does not matter.
    """

    def __init__(self, name="model", n_classes=len(LANDCOVER_CLASSES)):
        self.name = name
        self.n_classes = n_classes
        self.samples = []
        self.classes = {c: ClassStats() for c in range(n_classes)}

    def add(self, pred, target, landcover, cloud_fraction, aoi_id=""):
        row = sample_metrics(pred, target)
        row.update(cloud_fraction=float(cloud_fraction), aoi_id=aoi_id)
        self.samples.append(row)
        for c, s in class_stats(pred, target, landcover, self.n_classes).items():
            self.classes[c].add(s)
        return row

    def build(self):
        overall = {}
        for k in OVERALL_KEYS:
            vals = [s[k] for s in self.samples if s[k] is not None]
            overall[k] = float(np.mean(vals)) if vals else None
        per_class = {c: s.values() for c, s in self.classes.items()}
        return MetricsReport(overall, per_class, per_bin_report(self.samples), len(self.samples), self.name)


def table_csv(reports):
    """Comparison table with one row per report: per-class MAE, per-class SAM, then overall metrics."""
    names = LANDCOVER_CLASSES
    header = (["method"] + [f"mae_{n}" for n in names] + [f"sam_{n}" for n in names]
              + ["mae", "psnr", "sam_deg", "ssim"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)

    def cell(v):
        return "" if v is None else f"{v:.6g}"

    for r in reports:
        row = [r.name]
        row += [cell(r.per_class.get(c, {}).get("mae")) for c in range(len(names))]
        row += [cell(r.per_class.get(c, {}).get("sam_deg")) for c in range(len(names))]
        row += [cell(r.overall.get(k)) for k in OVERALL_KEYS]
        w.writerow(row)
    return buf.getvalue()


def bins_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin", "range", *BIN_KEYS])
    for b in range(N_BINS):
        e = report.per_bin.get(b)
        if e is None:
            continue
        rng = f"{b * 20}-{(b + 1) * 20}%"
        w.writerow([b, rng] + ["" if e.get(k) is None else f"{e[k]:.6g}" for k in BIN_KEYS])
    return buf.getvalue()
