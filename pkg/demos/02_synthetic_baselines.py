"""
=================================
Synthetic data and reference floors
=================================

Generates a small dataset spanning all five cloud bins, then scores two
reference predictors: the cloudy input itself, whose error grows with cloud
cover, and the cloud-free target, which hits the metric ceilings.
"""

import tempfile
from pathlib import Path

from aligncr.data.io import load_sample
from aligncr.data.synth import SynthConfig, synth_generate
from aligncr.metrics import ReportBuilder, bins_csv

root = Path(tempfile.mkdtemp()) / "data"
manifest = synth_generate(SynthConfig(n_train=0, n_test=20, size=120, misalign_min=2.0, misalign_max=4.0), 0, root)

identity, oracle = ReportBuilder("identity"), ReportBuilder("oracle")
for e in manifest.split("test"):
    s = load_sample(root / e.path)
    identity.add(s.cloudy.values, s.cloudfree.values, s.landcover.values, s.cloud_fraction, e.aoi_id)
    oracle.add(s.cloudfree.values, s.cloudfree.values, s.landcover.values, s.cloud_fraction, e.aoi_id)

print("identity baseline by cloud bin")
print(bins_csv(identity.build()))
print("oracle overall", oracle.build().overall)
