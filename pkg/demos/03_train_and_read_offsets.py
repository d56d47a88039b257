"""
=================================
A short training run
=================================

Trains a narrow model for a few epochs on misaligned synthetic data, then
evaluates it and reads back the mean offset its alignment stage applies to
each test sample next to the injected shift. A few epochs are far too few
for the offsets to converge; ``python -m aligncr.experiments`` runs the
full three-variant sweep.
"""

import tempfile
from pathlib import Path

import torch

from aligncr.data.synth import SynthConfig, synth_generate
from aligncr.experiments import evaluate_split
from aligncr.model import ModelConfig
from aligncr.train import TrainConfig, fit

torch.set_num_threads(1)
work = Path(tempfile.mkdtemp())
manifest = synth_generate(SynthConfig(n_train=16, n_test=4, size=120, misalign_min=2.0, misalign_max=4.0,
                                      cloud_min=0.2, cloud_max=0.6), 0, work / "data")

cfg = ModelConfig(D=2, channels=16, offset_groups=4, rdb_growth=16, rdb_layers=3)
model, rows = fit(manifest, work / "data", cfg, TrainConfig(batch_size=4, crop=80, epochs=3, val_samples=2),
                  out_dir=work / "run")
for r in rows:
    print(f"epoch {r['epoch']}: loss {r['train_loss']:.4f} val MAE {r['val_mae']:.4f}")

report, samples = evaluate_split(model, work / "data", manifest.split("test"), "demo", with_offsets=True)
print(f"test MAE {report.overall['mae']:.4f}  PSNR {report.overall['psnr']:.2f}")
for s in samples:
    d, o = s["displacement"], s["offset"]
    print(f"{s['aoi_id']}: shift ({d[0]:+.2f}, {d[1]:+.2f})  applied offset ({o[0]:+.3f}, {o[1]:+.3f})")
