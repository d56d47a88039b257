"""Paired ablation runs on misaligned synthetic data.

For each seed a dataset is generated, the three variants (full model,
without alignment, without SAR) are trained with identical settings and
evaluated on the test split. The full model additionally reports its
recovered SAR offset per test sample and is evaluated on a second test set
spanning all cloud-cover bins. Everything lands in ``<out>/summary.txt``.
"""

from __future__ import annotations

import argparse
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .data.io import load_sample
from .data.manifest import DatasetManifest
from .data.synth import SynthConfig, synth_generate
from .data.tiling import N_BINS
from .metrics import MetricsReport, ReportBuilder
from .model import ModelConfig
from .train import LossConfig, TrainConfig, fit

log = logging.getLogger(__name__)

VARIANTS = {
    "aligncr": {"use_sar": True, "use_align": True},
    "wo_align": {"use_sar": True, "use_align": False},
    "wo_sar": {"use_sar": False, "use_align": False},
}


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    n_train: int = 500
    n_test: int = 100
    n_trend: int = 50
    misalign: tuple = (2.0, 4.0)
    cloud: tuple = (0.2, 0.6)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(channels=32))
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)


def total_offset(fields):
    """Mean (dx, dy) of the full-resolution warps summed over blocks.

    Each block applies its level-1 field and then its cascade field; the SAR
    stream leaving a block is already warped, so displacements add up along
    the blocks.
    """
    total = np.zeros(2)
    for fs in fields:
        if fs is None:
            continue
        for key in ("l1", "cascade"):
            total += fs[key].mean_displacement().double().numpy().reshape(-1, 2).mean(axis=0)
    return total


def evaluate_split(model, root, entries, name, with_offsets=False):
    """Full-extent evaluation; returns (report, per-sample rows)."""
    builder = ReportBuilder(name)
    rows = []
    dt = next(model.parameters()).dtype
    model.eval()
    for e in entries:
        s = load_sample(Path(root) / e.path)
        pred = model.predict(
            torch.from_numpy(s.cloudy.values).to(dt),
            torch.from_numpy(s.sar.values).to(dt),
            torch.from_numpy(s.cloudmask.values).to(dt),
            keep_fields=with_offsets,
        )
        row = builder.add(pred.image.double().numpy(), s.cloudfree.values, s.landcover.values, s.cloud_fraction, e.aoi_id)
        row["displacement"] = tuple(float(v) for v in s.displacement)
        if with_offsets and model.cfg.use_sar and model.cfg.use_align:
            row["offset"] = tuple(float(v) for v in total_offset(pred.fields))
        rows.append(row)
    return builder.build(), rows


def offset_stats(rows):
    """Agreement between recovered offsets and the negated injected displacement."""
    cos, mag_err, epe = [], [], []
    for r in rows:
        if "offset" not in r:
            continue
        o = np.asarray(r["offset"])
        t = -np.asarray(r["displacement"])
        no, nt = np.linalg.norm(o), np.linalg.norm(t)
        cos.append(float(o @ t / (no * nt)) if no > 0 and nt > 0 else 0.0)
        mag_err.append(abs(no - nt))
        epe.append(float(np.linalg.norm(o - t)))
    if not cos:
        return None
    return {"mean_cos": float(np.mean(cos)), "mean_mag_err": float(np.mean(mag_err)), "mean_epe": float(np.mean(epe))}


def _dataset(root, synth_cfg, seed):
    manifest_path = Path(root) / "manifest.txt"
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    return synth_generate(synth_cfg, seed, root)


def _write_rows(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            parts = [f"aoi_id={r['aoi_id']}", f"cloud_fraction={r['cloud_fraction']!r}", f"mae={r['mae']!r}",
                     "displacement={!r},{!r}".format(*r["displacement"])]
            if "offset" in r:
                parts.append("offset={!r},{!r}".format(*r["offset"]))
            fh.write(" ".join(parts) + "\n")


def run_ablation(cfg, out_dir):
    """Run every seed/variant pair not already finished under ``out_dir``.

    Finished runs are detected by their ``eval.txt`` so an interrupted sweep
    resumes where it stopped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = cfg.misalign
    for seed in cfg.seeds:
        sdir = out / f"seed{seed}"
        base = SynthConfig(n_train=cfg.n_train, n_test=cfg.n_test, misalign_min=lo, misalign_max=hi,
                           cloud_min=cfg.cloud[0], cloud_max=cfg.cloud[1])
        data_root = sdir / "data"
        manifest = _dataset(data_root, base, seed)
        trend_root = sdir / "trend_data"
        trend_cfg = replace(base, n_train=0, n_test=cfg.n_trend, cloud_min=0.0, cloud_max=1.0)
        trend = _dataset(trend_root, trend_cfg, 1000 + seed)
        for name, flags in VARIANTS.items():
            vdir = sdir / name
            if (vdir / "eval.txt").exists():
                continue
            t0 = time.perf_counter()
            model_cfg = replace(cfg.model, **flags)
            train_cfg = replace(cfg.train, seed=seed)
            resume = vdir / "last" if (vdir / "last" / "params.bin").exists() else None
            fit(manifest, data_root, model_cfg, train_cfg, cfg.loss, out_dir=vdir, resume=resume)
            model, _ = load_checkpoint(vdir / "final")
            report, rows = evaluate_split(model, data_root, manifest.split("test"), name, with_offsets=True)
            _write_rows(vdir / "test_samples.txt", rows)
            if name == "aligncr":
                trep, trows = evaluate_split(model, trend_root, trend.split("test"), name)
                (vdir / "trend_eval.txt").write_text(trep.render())
                _write_rows(vdir / "trend_samples.txt", trows)
            (vdir / "eval.txt").write_text(report.render())
            log.info("seed %d %s done in %.0f s: test MAE %.5f", seed, name, time.perf_counter() - t0,
                     report.overall["mae"])
    write_summary(out, cfg)
    return load_summary(out / "summary.txt")


def read_rows(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        r = {}
        for tok in line.split():
            k, v = tok.split("=", 1)
            if k in ("displacement", "offset"):
                r[k] = tuple(float(x) for x in v.split(","))
            elif k == "aoi_id":
                r[k] = v
            else:
                r[k] = float(v)
        rows.append(r)
    return rows


def write_summary(out, cfg=None):
    out = Path(out)
    lines = ["# aligncr-ablation v1"]
    if cfg is not None:
        lines.append(f"# config n_train={cfg.n_train} n_test={cfg.n_test} n_trend={cfg.n_trend} "
                     f"misalign={cfg.misalign[0]},{cfg.misalign[1]} cloud={cfg.cloud[0]},{cfg.cloud[1]}")
        lines.append("# model " + " ".join(f"{k}={v}" for k, v in asdict(cfg.model).items()))
        lines.append("# train " + " ".join(f"{k}={v}" for k, v in asdict(cfg.train).items()))
    for sdir in sorted(out.glob("seed*")):
        seed = sdir.name[4:]
        for name in VARIANTS:
            ev = sdir / name / "eval.txt"
            if not ev.exists():
                continue
            rep = MetricsReport.parse(ev.read_text())
            parts = [f"seed={seed}", f"variant={name}", f"test_mae={rep.overall['mae']!r}",
                     f"n_test={rep.n_samples}"]
            if name == "aligncr":
                st = offset_stats(read_rows(sdir / name / "test_samples.txt"))
                if st:
                    parts += [f"{k}={v!r}" for k, v in st.items()]
                trend_file = sdir / name / "trend_eval.txt"
                if trend_file.exists():
                    trep = MetricsReport.parse(trend_file.read_text())
                    bins = [trep.per_bin.get(b, {}).get("mae") for b in range(N_BINS)]
                    parts.append("trend_mae=" + ",".join("na" if v is None else repr(v) for v in bins))
            lines.append(" ".join(parts))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def load_summary(path):
    """Parse summary.txt into ``{seed: {variant: {key: value}}}``."""
    res = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        kv = dict(tok.split("=", 1) for tok in line.split())
        seed, name = int(kv.pop("seed")), kv.pop("variant")
        entry = {}
        for k, v in kv.items():
            if k == "trend_mae":
                entry[k] = [None if x == "na" else float(x) for x in v.split(",")]
            else:
                entry[k] = float(v)
        res.setdefault(seed, {})[name] = entry
    return res


def ordering_holds(seed_result, margin=0.05):
    """Full model < w/o Align < w/o SAR, with the full model at least ``margin`` below w/o Align."""
    try:
        a, b, c = (seed_result[v]["test_mae"] for v in ("aligncr", "wo_align", "wo_sar"))
    except KeyError:
        return False
    return a < b < c and a <= (1.0 - margin) * b


def trend_ok(bin_maes, allowed_inversions=1):
    """Nondecreasing across bins, tolerating ``allowed_inversions`` adjacent decreases."""
    vals = [v for v in bin_maes if v is not None]
    if len(vals) < N_BINS:
        return False
    inversions = sum(1 for a, b in zip(vals, vals[1:]) if b < a)
    return inversions <= allowed_inversions


def projected_hours(cfg, seconds_per_sample):
    """Wall-clock estimate for the training part of the sweep."""
    # w/o Align and w/o SAR cost roughly 0.6 and 0.4 of the full model per sample
    per_seed = cfg.n_train * cfg.train.epochs * seconds_per_sample * (1 + 0.6 + 0.4)
    return len(cfg.seeds) * per_seed / 3600.0


def finite(x):
    return x is not None and math.isfinite(x)


PRESETS = {
    # full protocol: 500 train / 100 test per seed at crop 160, batch 12
    "full": AblationConfig(),
    # single-core budget: see README for the throughput behind these numbers
    "desk": AblationConfig(
        n_train=150, n_test=50, n_trend=50,
        model=ModelConfig(D=2, channels=16, offset_groups=4, rdb_growth=16, rdb_layers=3),
        train=TrainConfig(batch_size=4, crop=80, epochs=30, val_samples=8),
    ),
}


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m aligncr.experiments",
                                description="Run the three-variant ablation sweep and write summary.txt.")
    p.add_argument("--out", required=True, help="sweep directory (resumed if it exists)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = PRESETS[args.preset]
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if args.epochs:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    run_ablation(cfg, args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")


if __name__ == "__main__":
    main()
