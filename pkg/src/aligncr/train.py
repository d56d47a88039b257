"""Masked Charbonnier objective, learning-rate schedule, cropping and training loop."""

from __future__ import annotations

import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_optimizer_state, save_checkpoint
from .data.grids import OPTICAL_WINDOW
from .data.io import load_sample
from .data.manifest import DatasetManifest
from .model import AlignCR, ModelConfig

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when the loss or gradients stop being finite."""


@dataclass
class LossConfig:
    w: float = 5.0
    epsilon: float = 1e-3
    alpha: float = 0.45

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


@dataclass
class TrainConfig:
    batch_size: int = 12
    crop: int = 160
    epochs: int = 30
    lr_main: float = 1e-4
    lr_align: float = 1e-5
    decay_factor: float = 0.5
    decay_every: int = 5
    decay_after: int = 10
    grad_clip: float = 1.0
    seed: int = 0
    val_samples: int = 16

    def check(self, model_cfg):
        if self.crop % 10 or self.crop > OPTICAL_WINDOW:
            raise ValueError(f"crop {self.crop} must be a multiple of 10 and at most {OPTICAL_WINDOW}")
        if self.crop % 4 or self.crop % model_cfg.window_size:
            raise ValueError(f"crop {self.crop} must be divisible by 4 and window size {model_cfg.window_size}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def charbonnier_masked(pred, target, mask, cfg=None):
    """Mean of ``(1 + w*M) * ((pred - target)^2 + eps^2)^alpha`` over all elements.

    Args:
        pred (Tensor): (..., 4, H, W) prediction.
        target (Tensor): same shape as ``pred``.
        mask (Tensor): (..., 1, H, W) cloud mask, broadcast over channels.
        cfg (LossConfig | None): constants; defaults to w=5, eps=1e-3, alpha=0.45.

    Returns:
        Tensor: scalar loss.
    """
    cfg = cfg or LossConfig()
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    for name, t in (("prediction", pred), ("target", target), ("mask", mask)):
        if not torch.isfinite(t).all():
            raise NumericalError(f"{name} contains non-finite values")
    rho = ((pred - target) ** 2 + cfg.epsilon ** 2) ** cfg.alpha
    if cfg.w == 0:
        return rho.mean()
    # (1 + w*M) * rho split so that M = 1 yields exactly (1 + w) times the M = 0 value
    return (1.0 + cfg.w) * (mask * rho).mean() + ((1.0 - mask) * rho).mean()


def lr_at(epoch, base, factor=0.5, every=5, after=10):
    """Step decay: ``base`` for epochs 1..after, then times ``factor`` every ``every`` epochs."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    steps = 0 if epoch <= after else (epoch - after - 1) // every + 1
    return base * factor ** steps


def crop_at(sample, r, c, crop):
    """Congruent crop of a quartet at optical anchor (r, c); SAR anchor is (3r/10, 3c/10)."""
    if crop % 10:
        raise ValueError(f"crop {crop} gives a non-integral SAR crop of {crop * 0.3:g} pixels")
    if r % 10 or c % 10:
        raise ValueError(f"crop anchor ({r}, {c}) must be a multiple of 10")
    H, W = sample.cloudy.values.shape[-2:]
    if crop > min(H, W) or r + crop > H or c + crop > W or r < 0 or c < 0:
        raise ValueError(f"crop {crop} at ({r}, {c}) does not fit a {H}x{W} sample")
    sr, sc, sk = r * 3 // 10, c * 3 // 10, crop * 3 // 10
    opt = np.s_[:, r:r + crop, c:c + crop]
    sar = np.s_[:, sr:sr + sk, sc:sc + sk]
    return {
        "cloudy": sample.cloudy.values[opt],
        "cloudfree": sample.cloudfree.values[opt],
        "mask": sample.cloudmask.values[opt],
        "sar": sample.sar.values[sar],
        "landcover": sample.landcover.values[sar],
    }


def random_crop(sample, crop, rng):
    """Crop at a random anchor on the 10-pixel lattice so SAR windows land on whole pixels."""
    H, W = sample.cloudy.values.shape[-2:]
    if crop % 10 or crop > min(H, W):
        raise ValueError(f"crop {crop} infeasible for a {H}x{W} sample (needs a multiple of 10 <= extent)")
    r = 10 * int(rng.integers(0, (H - crop) // 10 + 1))
    c = 10 * int(rng.integers(0, (W - crop) // 10 + 1))
    return crop_at(sample, r, c, crop)


def _batch(crops, dtype):
    return {k: torch.from_numpy(np.stack([c[k] for c in crops])).to(dtype) for k in crops[0]}


def make_optimizer(model, cfg):
    align, rest = model.param_groups()
    groups = [{"params": rest, "lr": cfg.lr_main, "name": "main"}]
    if align:
        groups.append({"params": align, "lr": cfg.lr_align, "name": "align"})
    return torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)


def _set_lrs(opt, cfg, epoch):
    kw = dict(factor=cfg.decay_factor, every=cfg.decay_every, after=cfg.decay_after)
    for g in opt.param_groups:
        base = cfg.lr_align if g["name"] == "align" else cfg.lr_main
        g["lr"] = lr_at(epoch, base, **kw)
    return {g["name"]: g["lr"] for g in opt.param_groups}


def evaluate_mae(model, root, entries):
    """Mean per-sample MAE of clamped full-extent predictions."""
    vals = []
    for e in entries:
        s = load_sample(Path(root) / e.path)
        dt = next(model.parameters()).dtype
        pred = model.predict(
            torch.from_numpy(s.cloudy.values).to(dt),
            torch.from_numpy(s.sar.values).to(dt),
            torch.from_numpy(s.cloudmask.values).to(dt),
        ).image
        vals.append(float(np.abs(pred.double().numpy() - s.cloudfree.values.astype(np.float64)).mean()))
    return float(np.mean(vals)) if vals else math.nan


def format_log_row(row):
    parts = []
    for k, v in row.items():
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def parse_log(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        row = {}
        for tok in line.split():
            k, v = tok.split("=", 1)
            row[k] = int(v) if k == "epoch" else float(v)
        rows.append(row)
    return rows


def fit(manifest, root, model_cfg=None, train_cfg=None, loss_cfg=None, out_dir="run", resume=None,
        dtype=torch.float32, on_epoch=None):
    """Train a model on the ``train`` split of ``manifest``.

    Each epoch draws its sample order and crop anchors from
    ``default_rng([seed, epoch])``, so a resumed run replays exactly the epochs
    an uninterrupted run would. Writes ``<out>/last``, ``<out>/best`` and
    ``<out>/final`` checkpoints plus ``<out>/train_log.txt``.

    Args:
        manifest (DatasetManifest | str | Path): dataset manifest or its path.
        root (str | Path): dataset root the manifest paths are relative to.
        model_cfg (ModelConfig | None): ignored when resuming (the stored config is used).
        train_cfg (TrainConfig | None): optimisation settings.
        loss_cfg (LossConfig | None): objective constants.
        out_dir (str | Path): output directory.
        resume (str | Path | None): checkpoint directory to continue from.
        dtype (torch.dtype): parameter and data precision.
        on_epoch (callable | None): called with each log row.

    Returns:
        tuple: (model, list of log rows for the epochs run in this call).
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    train_cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    train_entries = manifest.split("train")
    if not train_entries:
        raise ValueError("manifest has no training samples")
    val_entries = (manifest.split("val") or manifest.split("test"))[: train_cfg.val_samples]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    start_epoch = 1
    best = math.inf
    if resume is not None:
        model, echo = load_checkpoint(resume)
        model = model.to(dtype)
        model_cfg = model.cfg
        start_epoch = int(echo["meta"]["epoch"]) + 1
        best = float(echo["meta"].get("best_score", "inf"))
    else:
        model_cfg = model_cfg or ModelConfig()
        torch.manual_seed(train_cfg.seed)
        model = AlignCR(model_cfg).to(dtype)
    train_cfg.check(model_cfg)
    opt = make_optimizer(model, train_cfg)
    if resume is not None:
        load_optimizer_state(resume, opt)

    log_path = out / "train_log.txt"
    if resume is None or not log_path.exists():
        log_path.write_text("# aligncr-train-log v1\n")
    rows = []
    for epoch in range(start_epoch, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        lrs = _set_lrs(opt, train_cfg, epoch)
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = rng.permutation(len(train_entries))
        model.train()
        total, count = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            crops = [random_crop(load_sample(Path(root) / train_entries[i].path), train_cfg.crop, rng) for i in idx]
            b = _batch(crops, dtype)
            pred = model(b["cloudy"], b["sar"], b["mask"])
            loss = charbonnier_masked(pred, b["cloudfree"], b["mask"], loss_cfg)
            if not torch.isfinite(loss):
                raise NumericalError(f"loss became {loss.item()} at epoch {epoch}; last good checkpoint: {out / 'last'}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            if not torch.isfinite(norm):
                raise NumericalError(f"gradient norm became {norm.item()} at epoch {epoch}; last good checkpoint: {out / 'last'}")
            opt.step()
            if not all(bool(torch.isfinite(p).all()) for p in model.parameters()):
                raise NumericalError(f"parameters became non-finite at epoch {epoch}; last good checkpoint: {out / 'last'}")
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        model.eval()
        val_mae = evaluate_mae(model, root, val_entries)
        row = {"epoch": epoch}
        row.update({f"lr_{k}": v for k, v in lrs.items()})
        row.update(train_loss=train_loss, val_mae=val_mae, wall_s=round(time.perf_counter() - t0, 3))
        score = val_mae if val_entries else train_loss
        improved = score < best
        best = min(best, score)
        meta = {"epoch": epoch, "best_score": best, "train_loss": train_loss, "val_mae": val_mae}
        save_checkpoint(out / "last", model, opt, asdict(train_cfg), asdict(loss_cfg), meta)
        if improved:
            save_checkpoint(out / "best", model, None, asdict(train_cfg), asdict(loss_cfg), meta)
        with log_path.open("a") as fh:
            fh.write(format_log_row(row) + "\n")
        log.info(format_log_row(row))
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if (out / "last").exists():
        if (out / "final").exists():
            shutil.rmtree(out / "final")
        shutil.copytree(out / "last", out / "final")
    return model, rows
