"""Line-oriented dataset manifest.

Each non-comment line is a whitespace-separated list of ``key=value`` pairs
describing one sample; ``# key=value`` lines carry dataset-level metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    aoi_id: str
    split: str
    path: str
    cloud_fraction: float
    class_hist: list = field(default_factory=list)
    displacement: tuple = (0.0, 0.0)
    fallback_for_bin: int | None = None

    def render(self):
        parts = [
            f"aoi={self.aoi_id}",
            f"split={self.split}",
            f"path={self.path}",
            f"cloud_fraction={self.cloud_fraction!r}",
            "hist=" + ",".join(str(int(c)) for c in self.class_hist),
            f"dx={float(self.displacement[0])!r}",
            f"dy={float(self.displacement[1])!r}",
        ]
        if self.fallback_for_bin is not None:
            parts.append(f"fallback={self.fallback_for_bin}")
        return " ".join(parts)

    @classmethod
    def parse(cls, line):
        kv = dict(tok.split("=", 1) for tok in line.split())
        try:
            return cls(
                aoi_id=kv["aoi"],
                split=kv["split"],
                path=kv["path"],
                cloud_fraction=float(kv["cloud_fraction"]),
                class_hist=[int(c) for c in kv["hist"].split(",") if c],
                displacement=(float(kv["dx"]), float(kv["dy"])),
                fallback_for_bin=int(kv["fallback"]) if "fallback" in kv else None,
            )
        except KeyError as exc:
            raise ValueError(f"manifest line missing field {exc}: {line!r}") from None


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    seed: int | None = None

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)

    def validate(self, root=None):
        """Check split membership and, given ``root``, that every sample loads."""
        seen = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"{e.aoi_id}: unknown split {e.split!r}")
            if e.aoi_id in seen and seen[e.aoi_id] != e.split:
                raise ValueError(f"{e.aoi_id} appears in both {seen[e.aoi_id]} and {e.split}")
            if e.aoi_id in seen:
                raise ValueError(f"{e.aoi_id} listed twice")
            seen[e.aoi_id] = e.split
        if root is not None:
            from .io import load_sample

            for e in self.entries:
                load_sample(Path(root) / e.path)
        return self

    def render(self):
        lines = ["# aligncr-manifest v1"]
        if self.seed is not None:
            lines.append(f"# seed={self.seed}")
        lines += [e.render() for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text):
        entries, seed = [], None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("seed="):
                    seed = int(body.split("=", 1)[1])
                continue
            entries.append(ManifestEntry.parse(line))
        return cls(entries=entries, seed=seed)

    def save(self, path):
        Path(path).write_text(self.render())

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text())
