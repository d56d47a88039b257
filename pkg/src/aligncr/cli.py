"""Command-line entry point: ``aligncr {synth,tile,train,eval,infer,report}``.

Settings come from an optional INI-style config file (``--config``) with
sections ``[paths] [run] [model] [train] [loss] [synth]``; command-line flags
override it. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .data.grids import RasterError, RasterGrid
from .data.io import load_sample, save_sample, write_raster
from .data.manifest import DatasetManifest
from .data.synth import SynthConfig, synth_generate
from .data.tiling import N_BINS, cloud_bin, stratified_select, tile_aoi
from .metrics import MetricsReport, ReportBuilder, bins_csv, table_csv
from .model import ModelConfig
from .train import LossConfig, NumericalError, TrainConfig, fit

log = logging.getLogger("aligncr")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


@dataclass
class PathsConfig:
    data_root: str = "data"
    out_dir: str = "out"


@dataclass
class RunConfig:
    seed: int = 0


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    run: RunConfig = field(default_factory=RunConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


# train.seed is driven by [run] seed
_HIDDEN = {("train", "seed")}


def _sections(cfg):
    for f in fields(cfg):
        yield f.name, getattr(cfg, f.name)


def config_keys(cfg=None):
    """(section, key, default) for every config-file key."""
    cfg = cfg or ExperimentConfig()
    out = []
    for sec, obj in _sections(cfg):
        for f in fields(obj):
            if (sec, f.name) not in _HIDDEN:
                out.append((sec, f.name, getattr(obj, f.name)))
    return out


def _coerce(text, default, where):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


class ConfigError(ValueError):
    pass


def load_config(path=None, text=None):
    """Parse a config file; unknown sections or keys are rejected."""
    cfg = ExperimentConfig()
    if path is None and text is None:
        return cfg
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        if text is not None:
            cp.read_string(text)
        else:
            with open(path) as fh:
                cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = dict(_sections(cfg))
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown config section [{sec}]")
        obj = known[sec]
        names = {f.name for f in fields(obj)} - {k for s, k in _HIDDEN if s == sec}
        updates = {}
        for key, val in cp[sec].items():
            if key not in names:
                raise ConfigError(f"unknown config key {sec}.{key}")
            updates[key] = _coerce(val, getattr(obj, key), f"{sec}.{key}")
        setattr(cfg, sec, replace(obj, **updates))
    return cfg


def render_config(cfg):
    lines = []
    for sec, obj in _sections(cfg):
        lines.append(f"[{sec}]")
        for f in fields(obj):
            if (sec, f.name) not in _HIDDEN:
                lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    return "\n".join(lines)


def _keys_epilog():
    lines = ["config keys (section.key = default):"]
    lines += [f"  {sec}.{key} = {val}" for sec, key, val in config_keys()]
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, help="random seed (run.seed)")
    p.add_argument("--out", help="output directory (paths.out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="aligncr", description="Cloud removal by fusing optical and misaligned SAR imagery.",
                     epilog=_keys_epilog(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset", epilog=_keys_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--root", help="dataset directory (paths.data_root)")
    p.add_argument("--n", type=int, help="training samples (synth.n_train)")
    p.add_argument("--n-test", type=int, help="test samples (synth.n_test)")
    p.add_argument("--size", type=int, help="optical extent per sample (synth.size)")
    p.add_argument("--misalign", help="max shift in optical pixels, or 'min,max'")
    p.add_argument("--cloud", help="cloud-fraction range 'min,max'")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dataset directory")

    p = sub.add_parser("tile", help="cut large AOIs into 300x300 windows and select a stratified subset",
                       epilog=_keys_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--src", required=True, help="dataset root holding AOI-sized samples and a manifest")
    p.add_argument("--root", help="destination dataset directory (paths.data_root)")
    p.add_argument("--stride", type=int, default=300, help="window stride in optical pixels (multiple of 10)")
    p.add_argument("--n", type=int, help="windows to keep per split (default: all)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model", epilog=_keys_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--data", help="dataset root (paths.data_root)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--blocks", type=int, help="AlignFuse block count (model.D)")
    p.add_argument("--no-sar", action="store_true", help="optical-only ablation")
    p.add_argument("--no-align", action="store_true", help="skip the alignment stage")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a reference baseline", epilog=_keys_epilog(),
                       formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint directory")
    p.add_argument("--baseline", choices=("identity", "oracle"),
                   help="identity: prediction = cloudy input; oracle: prediction = cloud-free target")
    p.add_argument("--data", help="dataset root (paths.data_root)")
    p.add_argument("--split", default="test")
    p.add_argument("--name", help="method name in the report")
    p.add_argument("--save-images", action="store_true", help="write predictions as rasters")

    p = sub.add_parser("infer", help="reconstruct one sample", epilog=_keys_epilog(), formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample directory")

    p = sub.add_parser("report", help="merge evaluation reports into comparison tables", epilog=_keys_epilog(),
                       formatter_class=fmt)
    _add_common(p)
    p.add_argument("reports", nargs="+", help="report.txt files written by eval")
    return parser


def _range(text, lo_default=0.0):
    parts = [float(x) for x in text.split(",")]
    if len(parts) == 1:
        return min(lo_default, parts[0]), parts[0]
    if len(parts) != 2 or parts[0] > parts[1]:
        raise ConfigError(f"bad range {text!r}")
    return parts[0], parts[1]


def _record_outputs(out, paths):
    """Append produced files to ``<out>/outputs.txt`` (deduplicated, sorted)."""
    out = Path(out)
    listing = out / "outputs.txt"
    known = set(listing.read_text().split("\n")) if listing.exists() else set()
    known |= {str(Path(p).relative_to(out)) for p in paths}
    known.discard("")
    listing.write_text("\n".join(sorted(known)) + "\n")


def _bin_histogram(manifest):
    counts = {split: [0] * N_BINS for split in ("train", "test")}
    for e in manifest.entries:
        counts.setdefault(e.split, [0] * N_BINS)[cloud_bin(e.cloud_fraction)] += 1
    lines = ["split  " + " ".join(f"{b * 20:>3d}-{(b + 1) * 20}%" for b in range(N_BINS))]
    for split, c in counts.items():
        lines.append(f"{split:6s} " + " ".join(f"{v:>8d}" for v in c))
    return "\n".join(lines)


def cmd_synth(args, cfg):
    sc = cfg.synth
    if args.n is not None:
        sc = replace(sc, n_train=args.n)
    if args.n_test is not None:
        sc = replace(sc, n_test=args.n_test)
    if args.size is not None:
        sc = replace(sc, size=args.size)
    if args.misalign is not None:
        lo, hi = _range(args.misalign, sc.misalign_min)
        sc = replace(sc, misalign_min=lo, misalign_max=hi)
    if args.cloud is not None:
        lo, hi = _range(args.cloud)
        sc = replace(sc, cloud_min=lo, cloud_max=hi)
    root = Path(args.root or cfg.paths.data_root)
    manifest = synth_generate(sc, cfg.run.seed, root, force=args.force)
    print(f"wrote {len(manifest)} samples to {root}")
    print(_bin_histogram(manifest))
    return 0


def cmd_tile(args, cfg):
    src = Path(args.src)
    dest = Path(args.root or cfg.paths.data_root)
    if dest.exists() and any(dest.iterdir()):
        if not args.force:
            raise FileExistsError(f"{dest} exists and is not empty")
        import shutil

        shutil.rmtree(dest)
    source = DatasetManifest.load(src / "manifest.txt")
    entries = []
    for split in ("train", "test"):
        candidates = []
        for e in source.split(split):
            s = load_sample(src / e.path)
            candidates += tile_aoi(s.cloudy.values, s.cloudfree.values, s.sar.values, s.landcover.values,
                                   s.cloudmask.values, args.stride, e.aoi_id, s.displacement)
        n = len(candidates) if args.n is None else min(args.n, len(candidates))
        picked = stratified_select(candidates, n, cfg.run.seed, split)
        by_id = {c.aoi_id: c for c in candidates}
        for e in picked.entries:
            save_sample(dest / e.path, by_id[e.aoi_id])
        entries += picked.entries
        print(f"{split}: {len(candidates)} windows, kept {n}")
    manifest = DatasetManifest(entries=entries, seed=cfg.run.seed)
    manifest.save(dest / "manifest.txt")
    print(_bin_histogram(manifest))
    return 0


def cmd_train(args, cfg):
    data = Path(args.data or cfg.paths.data_root)
    if not (data / "manifest.txt").is_file():
        raise FileNotFoundError(f"no dataset manifest at {data / 'manifest.txt'}")
    mc, tc = cfg.model, replace(cfg.train, seed=cfg.run.seed)
    for flag, key in ((args.channels, "channels"), (args.blocks, "D")):
        if flag is not None:
            mc = replace(mc, **{key: flag})
    if args.no_sar:
        mc = replace(mc, use_sar=False, use_align=False)
    if args.no_align:
        mc = replace(mc, use_align=False)
    for flag, key in ((args.epochs, "epochs"), (args.batch_size, "batch_size"), (args.crop, "crop")):
        if flag is not None:
            tc = replace(tc, **{key: flag})
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.ini").write_text(render_config(replace(cfg, model=mc, train=tc)))
    _, rows = fit(data / "manifest.txt", data, mc, tc, cfg.loss, out_dir=out, resume=args.resume)
    for r in rows:
        print(f"epoch {r['epoch']}: loss {r['train_loss']:.6f} val_mae {r['val_mae']:.6f} ({r['wall_s']:.1f} s)")
    produced = [out / "experiment.ini", out / "train_log.txt"]
    produced += [p for d in ("last", "best", "final") for p in (out / d).glob("*")]
    _record_outputs(out, produced)
    return 0


def _tensor(grid, dtype):
    return torch.from_numpy(grid.values).to(dtype)


def cmd_eval(args, cfg):
    if (args.checkpoint is None) == (args.baseline is None):
        raise ConfigError("give exactly one of --checkpoint or --baseline")
    data = Path(args.data or cfg.paths.data_root)
    manifest = DatasetManifest.load(data / "manifest.txt")
    entries = manifest.split(args.split)
    if not entries:
        raise ConfigError(f"split {args.split!r} is empty")
    model = None
    if args.checkpoint:
        expect = cfg.model if args.config else None
        try:
            model, _ = load_checkpoint(args.checkpoint, expect=expect)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        model.eval()
    name = args.name or (args.baseline or Path(args.checkpoint).resolve().parent.name)
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    builder = ReportBuilder(name)
    produced = []
    for e in entries:
        s = load_sample(data / e.path)
        if args.baseline == "identity":
            pred = s.cloudy.values.astype(np.float64)
        elif args.baseline == "oracle":
            pred = s.cloudfree.values.astype(np.float64)
        else:
            dt = next(model.parameters()).dtype
            p = model.predict(_tensor(s.cloudy, dt), _tensor(s.sar, dt), _tensor(s.cloudmask, dt)).image
            pred = p.double().numpy()
        if not np.isfinite(pred).all():
            raise NumericalError(f"non-finite prediction for {e.aoi_id}")
        builder.add(pred, s.cloudfree.values, s.landcover.values, s.cloud_fraction, e.aoi_id)
        if args.save_images:
            path = out / "images" / f"{e.aoi_id}.bin"
            path.parent.mkdir(exist_ok=True)
            write_raster(path, RasterGrid(np.clip(pred, 0, 1).astype(np.float32), s.cloudy.pixel_size_m, "optical4"))
            produced.append(path)
    report = builder.build()
    files = {
        "report.txt": report.render(),
        "table.csv": table_csv([report]),
        "bins.csv": bins_csv(report),
    }
    for fname, text in files.items():
        (out / fname).write_text(text)
        produced.append(out / fname)
    _record_outputs(out, produced)
    o = report.overall
    print(f"{name}: n={report.n_samples} MAE {o['mae']:.6f} PSNR {o['psnr']:.4f} "
          f"SAM {o['sam_deg']:.4f} SSIM {o['ssim']:.4f}")
    print(bins_csv(report), end="")
    return 0


def preview_rgb(image):
    """8-bit (H, W, 3) preview in (red, green, blue) order from a (blue, green, red, nir) stack."""
    rgb = np.clip(np.asarray(image)[[2, 1, 0]], 0.0, 1.0)
    return np.round(rgb * 255.0).astype(np.uint8).transpose(1, 2, 0)


def cmd_infer(args, cfg):
    from PIL import Image

    sample = load_sample(args.sample)
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    dt = next(model.parameters()).dtype
    pred = model.predict(_tensor(sample.cloudy, dt), _tensor(sample.sar, dt), _tensor(sample.cloudmask, dt)).image
    img = pred.float().numpy()
    if not np.isfinite(img).all():
        raise NumericalError("non-finite prediction")
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(out / "pred.bin", RasterGrid(img, sample.cloudy.pixel_size_m, "optical4"))
    Image.fromarray(preview_rgb(img), mode="RGB").save(out / "preview.png")
    _record_outputs(out, [out / "pred.bin", out / "preview.png"])
    print(f"wrote {out / 'pred.bin'} and {out / 'preview.png'}")
    return 0


def cmd_report(args, cfg):
    reports = [MetricsReport.parse(Path(p).read_text()) for p in args.reports]
    out = Path(args.out or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = table_csv(reports)
    (out / "comparison.csv").write_text(table)
    produced = [out / "comparison.csv"]
    for r in reports:
        path = out / f"bins_{r.name}.csv"
        path.write_text(bins_csv(r))
        produced.append(path)
    _record_outputs(out, produced)
    print(table, end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"aligncr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"aligncr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FileExistsError, RasterError, ValueError) as exc:
        print(f"aligncr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
