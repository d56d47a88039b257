"""Raster and named-array containers.

A raster file is one ASCII header line ``kind channels height width
pixel_size`` followed by the little-endian float32 payload in C order.
An array bundle (used for checkpoints) is a sequence of records, each a
header line ``array <name> <dtype> <ndim> <dims...>`` plus its payload.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .grids import KIND_CHANNELS, RasterError, RasterGrid, SampleQuartet

RASTER_FILES = {
    "cloudy": "cloudy.bin",
    "cloudfree": "cloudfree.bin",
    "sar": "sar.bin",
    "landcover": "lc.bin",
    "cloudmask": "mask.bin",
}
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def write_raster(path, grid):
    c, h, w = grid.values.shape
    header = f"{grid.kind} {c} {h} {w} {grid.pixel_size_m!r}\n".encode("ascii")
    payload = np.ascontiguousarray(grid.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_raster(path, validate=True):
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise RasterError(f"{path}: missing header line")
    try:
        kind, c, h, w, px = data[:nl].decode("ascii").split()
        c, h, w, px = int(c), int(h), int(w), float(px)
    except (UnicodeDecodeError, ValueError):
        raise RasterError(f"{path}: malformed header {data[:nl][:80]!r}") from None
    if kind not in KIND_CHANNELS:
        raise RasterError(f"{path}: unknown kind {kind!r}")
    payload = data[nl + 1:]
    expected = c * h * w * 4
    if len(payload) != expected:
        raise RasterError(
            f"{path}: header declares {c}x{h}x{w} ({expected} bytes), payload has {len(payload)} bytes"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)
    grid = RasterGrid(values, px, kind)
    if validate:
        try:
            grid.validate()
        except RasterError as exc:
            raise RasterError(f"{path}: {exc}") from None
    return grid


def _write_meta(path, meta):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def read_meta(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def save_sample(path, sample):
    """Write a quartet as ``<path>/{cloudy,cloudfree,sar,lc,mask}.bin`` + ``meta.txt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for attr, fname in RASTER_FILES.items():
        write_raster(path / fname, getattr(sample, attr))
    _write_meta(path / "meta.txt", {
        "aoi_id": sample.aoi_id,
        "cloud_fraction": repr(float(sample.cloud_fraction)),
        "dx": repr(float(sample.displacement[0])),
        "dy": repr(float(sample.displacement[1])),
    })


def load_sample(path, validate=True):
    path = Path(path)
    if not path.is_dir():
        raise RasterError(f"{path}: sample directory not found")
    try:
        meta = read_meta(path / "meta.txt")
        sample = SampleQuartet(
            **{attr: read_raster(path / fname, validate) for attr, fname in RASTER_FILES.items()},
            cloud_fraction=float(meta["cloud_fraction"]),
            aoi_id=meta["aoi_id"],
            displacement=(float(meta.get("dx", 0.0)), float(meta.get("dy", 0.0))),
        )
    except FileNotFoundError as exc:
        raise RasterError(f"{path}: missing file {Path(exc.filename).name}") from None
    except (KeyError, ValueError) as exc:
        if isinstance(exc, RasterError):
            raise
        raise RasterError(f"{path}: bad meta.txt ({exc})") from None
    if validate:
        sample.validate()
    return sample


def write_arrays(path, arrays):
    """Write an ordered mapping ``name -> ndarray`` as an array bundle."""
    chunks = []
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"array name {name!r} contains whitespace")
        arr = np.asarray(arr)
        code = {"f": "f8" if arr.dtype.itemsize == 8 else "f4", "i": "i8", "u": "i8", "b": "i8"}[arr.dtype.kind]
        dims = " ".join(str(d) for d in arr.shape)
        chunks.append(f"array {name} {code} {arr.ndim} {dims}".rstrip().encode("ascii") + b"\n")
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_arrays(path):
    data = Path(path).read_bytes()
    out, pos = {}, 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ValueError(f"{path}: truncated record header at byte {pos}")
        tok = data[pos:nl].decode("ascii").split()
        if len(tok) < 4 or tok[0] != "array" or tok[2] not in _DTYPES:
            raise ValueError(f"{path}: malformed record header {data[pos:nl][:80]!r}")
        name, dtype, ndim = tok[1], _DTYPES[tok[2]], int(tok[3])
        shape = tuple(int(d) for d in tok[4:4 + ndim])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = nl + 1
        if start + nbytes > len(data):
            raise ValueError(f"{path}: record {name} truncated")
        out[name] = np.frombuffer(data[start:start + nbytes], dtype=dtype).reshape(shape).copy()
        pos = start + nbytes
    return out
